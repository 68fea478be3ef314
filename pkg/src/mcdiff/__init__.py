"""mcdiff: conditional diffusion for multi-channel imputation."""

__version__ = "0.1.0"

from .data import (
    ChannelMask,
    ChannelPanel,
    Condition,
    Dataset,
    MultiChannelSample,
    apply_mask,
    normalize_per_channel,
    read_container,
    tile,
    write_container,
)
from .network import Denoiser, NetworkConfig, count_params
from .sampling import SamplerConfig, generate_unconditional, impute, posterior_mean_estimate
from .schedule import NoiseSchedule, build_schedule, forward_sample, posterior_step, score_from_eps
from .training import TrainConfig, fixed_channel_mode, sample_mask, train

__all__ = [
    "__version__",
    "ChannelMask",
    "ChannelPanel",
    "Condition",
    "Dataset",
    "MultiChannelSample",
    "apply_mask",
    "normalize_per_channel",
    "read_container",
    "tile",
    "write_container",
    "Denoiser",
    "NetworkConfig",
    "count_params",
    "SamplerConfig",
    "generate_unconditional",
    "impute",
    "posterior_mean_estimate",
    "NoiseSchedule",
    "build_schedule",
    "forward_sample",
    "posterior_step",
    "score_from_eps",
    "TrainConfig",
    "fixed_channel_mode",
    "sample_mask",
    "train",
]
