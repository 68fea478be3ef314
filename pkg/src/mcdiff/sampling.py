"""Reverse-process generation: conditional imputation and the unconditional
baseline. Timesteps may be subsampled by strided selection (steps <= T)."""

from dataclasses import dataclass

import numpy as np

from .data import ChannelMask, MultiChannelSample, apply_mask, apply_mask_array
from .errors import BadConfig, EmptyObservedSet, StatsMismatch
from .network import Checkpoint, denoiser_from_checkpoint, load_checkpoint
from .schedule import build_schedule, step_between
from .training import build_condition


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    sigma_mode: str = "stochastic"  # stochastic | stochastic-tilde | deterministic
    k_samples: int = 4
    overwrite_observed: bool = False
    seed: int = 0
    x0_clip: tuple | None = (0.0, 1.0)  # normalized data range

    def __post_init__(self):
        if self.steps < 1:
            raise BadConfig("steps must be >= 1")
        if self.k_samples < 1:
            raise BadConfig("k_samples must be >= 1")
        if self.sigma_mode not in ("stochastic", "stochastic-tilde", "deterministic"):
            raise BadConfig(f"unknown sigma mode {self.sigma_mode!r}")
        if self.x0_clip is not None:
            object.__setattr__(self, "x0_clip",
                               (float(self.x0_clip[0]), float(self.x0_clip[1])))


def timestep_path(T, steps):
    """Strided descending timesteps from T to 1 (unique, at most `steps`)."""
    if steps > T:
        raise BadConfig(f"steps {steps} exceeds schedule T={T}")
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(np.int64))[::-1]
    return ts


def load_sampler(checkpoint):
    """(net, schedule, checkpoint) from a path or loaded Checkpoint."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    net = denoiser_from_checkpoint(ckpt)
    sched = build_schedule(ckpt.schedule_kind, ckpt.num_timesteps)
    return net, sched, ckpt


def reverse_chain(net, sched, cond, n, cfg: SamplerConfig, rng):
    """Run the reverse process from pure noise for n parallel samples."""
    c = net.config.in_channels
    h, w = net.config.height, net.config.width
    x = rng.standard_normal((n, c, h, w), dtype=np.float32)
    ts = timestep_path(sched.T, cfg.steps)
    for i, t in enumerate(ts):
        t = int(t)
        eps_hat = net.forward(x, t, cond)
        t_lo = int(ts[i + 1]) if i + 1 < len(ts) else 0
        z = None
        if cfg.sigma_mode.startswith("stochastic") and t_lo > 0:
            z = rng.standard_normal(x.shape, dtype=np.float32)
        x = step_between(x, eps_hat, t, t_lo, sched, z=z,
                         sigma_mode=cfg.sigma_mode, x0_clip=cfg.x0_clip)
    return x


def impute_batch(net, sched, data, observed, cfg: SamplerConfig, rng=None):
    """Impute K chains for each of Ns inputs. Returns (K, Ns, C, H, W).

    `observed` is a (C,) or (Ns, C) boolean matrix; masked channels of the
    input never reach the network (zero-filled condition).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    data = np.asarray(data, dtype=np.float32)
    ns, c = data.shape[0], data.shape[1]
    obs = np.asarray(observed, dtype=bool)
    if obs.ndim == 1:
        obs = np.broadcast_to(obs, (ns, c))
    if not obs.any(axis=1).all():
        raise EmptyObservedSet("every sample needs at least one observed channel")
    cond = build_condition(data, obs, net.config.mask_indicator)
    cond_k = np.ascontiguousarray(np.tile(cond, (cfg.k_samples, 1, 1, 1)))
    x0 = reverse_chain(net, sched, cond_k, cfg.k_samples * ns, cfg, rng)
    x0 = x0.reshape(cfg.k_samples, ns, *data.shape[1:])
    if cfg.overwrite_observed:
        m = obs[None, :, :, None, None]
        x0 = np.where(m, data[None], x0)
    return x0


def impute(checkpoint, x_obs: MultiChannelSample, mask: ChannelMask,
           cfg: SamplerConfig, stats=None):
    """K imputations of the full panel given the observed channels of x_obs."""
    net, sched, ckpt = load_sampler(checkpoint)
    mask.require_observed()
    if stats is not None and ckpt.stats is not None and not ckpt.stats.same_as(stats):
        raise StatsMismatch("input normalization differs from the checkpoint's")
    apply_mask(x_obs, mask)  # validates mask length against the panel
    out = impute_batch(net, sched, x_obs.data[None], mask.observed, cfg)
    return out[:, 0]


def generate_unconditional(checkpoint, cfg: SamplerConfig, n=1):
    """Reverse chain with an all-zero condition (reserved unconditional mode).

    Returns (K, C, H, W) for n=1, else (K, n, C, H, W).
    """
    net, sched, _ = load_sampler(checkpoint)
    rng = np.random.default_rng(cfg.seed)
    cond = None
    if net.config.conditional:
        cond = np.zeros((cfg.k_samples * n, net.config.cond_channels,
                         net.config.height, net.config.width), dtype=np.float32)
    x0 = reverse_chain(net, sched, cond, cfg.k_samples * n, cfg, rng)
    x0 = x0.reshape(cfg.k_samples, n, *x0.shape[1:])
    return x0[:, 0] if n == 1 else x0


def posterior_mean_estimate(samples):
    """Per-element mean over the leading K axis."""
    samples = np.asarray(samples)
    if samples.shape[0] < 1:
        raise BadConfig("need at least one sample")
    return samples.mean(axis=0)
