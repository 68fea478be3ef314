from .backend import backend_name, get_backends
from .layers import (
    ChannelSelfAttention,
    Conv2d,
    GroupNorm,
    Linear,
    Module,
    Param,
    SEGate,
    SiLU,
    TimestepEmbed,
    Upsample2x,
    clip_grads_,
    global_grad_norm,
)

__all__ = [
    "backend_name",
    "get_backends",
    "ChannelSelfAttention",
    "Conv2d",
    "GroupNorm",
    "Linear",
    "Module",
    "Param",
    "SEGate",
    "SiLU",
    "TimestepEmbed",
    "Upsample2x",
    "clip_grads_",
    "global_grad_norm",
]
