"""Noise schedules, forward diffusion, score conversion, reverse steps.

``alpha_bar[t]`` is the cumulative signal coefficient: 1 at t=0, fading to
(almost) 0 at t=T. Per-step quantities are derived from ratios
``a_t = alpha_bar[t] / alpha_bar[t-1]``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadTimesteps, ShapeMismatch, TimestepOutOfRange

SCHEDULE_KINDS = ("linear", "cosine")

# Reference beta range for T=1000, rescaled for other T (keeps the endpoint
# signal level roughly T-independent).
_BETA_START, _BETA_END = 1e-4, 0.02
_COSINE_S = 0.008
_BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative-signal schedule over T timesteps."""

    T: int
    alpha_bar: np.ndarray  # float64, length T+1, alpha_bar[0] == 1
    kind: str = "cosine"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if self.T < 2:
            raise BadTimesteps(f"T must be >= 2, got {self.T}")
        if ab.shape != (self.T + 1,):
            raise ShapeMismatch("alpha_bar must have length T+1")
        if ab[0] != 1.0:
            raise BadTimesteps("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise BadTimesteps("alpha_bar must be strictly decreasing")
        if ab[-1] >= 1e-3:
            raise BadTimesteps(f"alpha_bar[T]={ab[-1]:.3e} >= 1e-3")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise BadTimesteps("alpha_bar entries must lie in (0, 1]")

    def check_t(self, t, lo=0):
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T):
            raise TimestepOutOfRange(f"t={t} outside [{lo}, {self.T}]")


def build_schedule(kind: str, T: int) -> NoiseSchedule:
    """Construct a linear-beta or cosine schedule with T steps."""
    if T < 2:
        raise BadTimesteps(f"T must be >= 2, got {T}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(_BETA_START * scale, _BETA_END * scale, T)
        betas = np.clip(betas, 0.0, _BETA_MAX)
    elif kind == "cosine":
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((t / T + _COSINE_S) / (1 + _COSINE_S)) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, _BETA_MAX)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; choose from {SCHEDULE_KINDS}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, kind=kind)


def _coeffs(s, t, ndim):
    """sqrt(ab[t]) and sqrt(1-ab[t]) broadcast against an ndim-array."""
    ab = s.alpha_bar[np.asarray(t)]
    shape = np.shape(t) + (1,) * (ndim - np.ndim(t))
    return (np.sqrt(ab).reshape(shape), np.sqrt(1.0 - ab).reshape(shape))


def forward_sample(x0, t, eps, s: NoiseSchedule):
    """x_t = sqrt(ab[t]) * x0 + sqrt(1-ab[t]) * eps  (t may be per-sample)."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
    s.check_t(t, lo=0)
    c_sig, c_noise = _coeffs(s, t, x0.ndim)
    return (c_sig * x0 + c_noise * eps).astype(x0.dtype, copy=False)


def score_from_eps(eps_hat, t, s: NoiseSchedule):
    """Score estimate -eps_hat / sqrt(1 - ab[t])."""
    s.check_t(t, lo=1)
    eps_hat = np.asarray(eps_hat)
    _, c_noise = _coeffs(s, t, eps_hat.ndim)
    return (-eps_hat / c_noise).astype(eps_hat.dtype, copy=False)


def predict_x0(x_t, eps_hat, t, s: NoiseSchedule):
    """Invert the forward map under the noise estimate."""
    s.check_t(t, lo=1)
    c_sig, c_noise = _coeffs(s, t, np.ndim(x_t))
    return (x_t - c_noise * eps_hat) / c_sig


def step_between(x_t, eps_hat, t_hi, t_lo, s: NoiseSchedule, z=None,
                 sigma_mode="stochastic", x0_clip=None):
    """One reverse step from timestep t_hi down to t_lo (t_lo < t_hi).

    Deterministic mode moves to the exact forward marginal implied by the
    current noise estimate: sqrt(ab[lo]) x0_hat + sqrt(1-ab[lo]) eps_hat
    (with the oracle eps_hat this inverts forward_sample exactly).
    Stochastic mode is the ancestral update with variance b = 1 - ab[hi]/ab[lo]
    ("stochastic-tilde" uses the smaller posterior variance
    b*(1-ab[lo])/(1-ab[hi])); the noise draw z is forced to zero at t_lo == 0.

    x0_clip=(lo, hi) clamps the implied x0 estimate to the data range before
    the update. Near t=T the signal coefficient is almost zero, so unclamped
    estimates amplify model error by 1/sqrt(ab) and a learned-model chain
    diverges; clamping is essential there and a no-op for accurate estimates.
    """
    s.check_t(t_hi, lo=1)
    s.check_t(t_lo, lo=0)
    if not np.all(np.asarray(t_lo) < np.asarray(t_hi)):
        raise TimestepOutOfRange(f"t_lo {t_lo} must be < t_hi {t_hi}")
    x_t = np.asarray(x_t)
    dtype = x_t.dtype
    x0_hat = predict_x0(x_t, eps_hat, t_hi, s)
    c_sig_hi, c_noise_hi = _coeffs(s, t_hi, x_t.ndim)
    if x0_clip is not None:
        x0_hat = np.clip(x0_hat, x0_clip[0], x0_clip[1])
        eps_hat = (x_t - c_sig_hi * x0_hat) / c_noise_hi
    if sigma_mode == "deterministic":
        c_sig, c_noise = _coeffs(s, t_lo, x_t.ndim)
        return (c_sig * x0_hat + c_noise * eps_hat).astype(dtype, copy=False)
    if sigma_mode not in ("stochastic", "stochastic-tilde"):
        raise ValueError(f"unknown sigma mode {sigma_mode!r}")
    ab = s.alpha_bar
    ab_hi = ab[np.asarray(t_hi)]
    ab_lo = ab[np.asarray(t_lo)]
    shape = np.shape(t_hi) + (1,) * (x_t.ndim - np.ndim(t_hi))
    a = (ab_hi / ab_lo).reshape(shape)
    b = 1.0 - a
    # posterior mean in x0 form: equals (x - b/sqrt(1-ab_hi) eps)/sqrt(a)
    # but stays bounded under clamping
    one_m_hi = (1.0 - ab_hi).reshape(shape)
    one_m_lo = (1.0 - ab_lo).reshape(shape)
    mean = (np.sqrt(a) * one_m_lo * x_t
            + np.sqrt(ab_lo).reshape(shape) * b * x0_hat) / one_m_hi
    if z is None or np.all(np.asarray(t_lo) == 0):
        return mean.astype(dtype, copy=False)
    var = b if sigma_mode == "stochastic" else b * one_m_lo / one_m_hi
    sigma = np.sqrt(var) * np.where(np.asarray(t_lo).reshape(shape) > 0, 1.0, 0.0)
    return (mean + sigma * z).astype(dtype, copy=False)


def posterior_step(x_t, eps_hat, t, s: NoiseSchedule, z=None,
                   sigma_mode="stochastic", x0_clip=None):
    """Reverse step t -> t-1.

    In stochastic mode ``z=None`` drops the noise term (the posterior mean);
    deterministic mode ignores z entirely.
    """
    t_arr = np.asarray(t)
    return step_between(x_t, eps_hat, t_arr, t_arr - 1, s, z=z,
                        sigma_mode=sigma_mode, x0_clip=x0_clip)
