"""Random channel-masking training loop and the amortized objective.

Each step: draw a Bernoulli(p) observed-set per sample (resampling empty
draws, then forcing one channel so C_o >= 1 always holds), zero-fill the
condition, draw t and eps, form x_t, and regress the full-panel noise
prediction against eps. One Adam update per step. Deterministic and
resumable: the generator state rides inside every checkpoint.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import Dataset, apply_mask_array
from .errors import (
    BadConfig,
    EmptyObservedSet,
    NonFiniteLoss,
    UnknownChannel,
)
from .network import Denoiser, NetworkConfig, save_checkpoint, load_checkpoint, denoiser_from_checkpoint
from .nn.layers import clip_grads_
from .schedule import NoiseSchedule, build_schedule, forward_sample

MAX_MASK_RESAMPLES = 8


@dataclass(frozen=True)
class TrainConfig:
    p_observed: float = 0.5
    batch_size: int = 16
    steps: int = 2000
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    loss_weighting: str = "all"  # all | masked-only
    checkpoint_interval: int = 1000
    deterministic: bool = True
    fixed_targets: tuple | None = None  # channel names always masked

    def __post_init__(self):
        if not 0 < self.p_observed <= 1:
            raise BadConfig(f"p_observed must be in (0,1], got {self.p_observed}")
        if self.steps < 1 or self.batch_size < 1:
            raise BadConfig("steps and batch_size must be >= 1")
        if self.loss_weighting not in ("all", "masked-only"):
            raise BadConfig(f"unknown loss weighting {self.loss_weighting!r}")
        if self.fixed_targets is not None:
            object.__setattr__(self, "fixed_targets", tuple(self.fixed_targets))

    def to_dict(self):
        return asdict(self)


def fixed_channel_mode(targets):
    """TrainConfig modifier: the listed channels are always the masked set."""
    targets = tuple(targets)
    if not targets:
        raise UnknownChannel("fixed-channel mode requires a non-empty target list")

    def modify(cfg: TrainConfig) -> TrainConfig:
        return replace(cfg, fixed_targets=targets)

    return modify


def sample_mask(C, p, rng, allowed=None):
    """Bernoulli(p) observed vector; empty draws are resampled (<= 8 times)
    and finally one uniformly random channel is forced observed."""
    if C < 1:
        raise BadConfig("C must be >= 1")
    if not 0 <= p <= 1:
        raise BadConfig(f"p must be in [0,1], got {p}")
    if allowed is None:
        allowed = np.ones(C, dtype=bool)
    if not allowed.any():
        raise EmptyObservedSet("no channel is allowed to be observed")
    for _ in range(1 + MAX_MASK_RESAMPLES):
        obs = (rng.random(C) < p) & allowed
        if obs.any():
            return obs
    obs = np.zeros(C, dtype=bool)
    candidates = np.flatnonzero(allowed)
    obs[candidates[rng.integers(0, len(candidates))]] = True
    return obs


def _fixed_mask(panel_names, targets, C):
    obs = np.ones(C, dtype=bool)
    names = list(panel_names)
    for t in targets:
        if t not in names:
            raise UnknownChannel(f"{t!r} not in panel {names}")
        obs[names.index(t)] = False
    if not obs.any():
        raise EmptyObservedSet("fixed targets cover the whole panel")
    return obs


class Adam:
    """Adam with bias correction; moments live next to the params."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= p.data.dtype.type(self.b1)
            m += p.data.dtype.type(1 - self.b1) * g
            v *= p.data.dtype.type(self.b2)
            v += p.data.dtype.type(1 - self.b2) * (g * g)
            mhat = m / b1t
            vhat = v / b2t
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def tensors(self):
        out = {"opt.t": np.array([self.t], dtype=np.float64)}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"opt.m.{p.name}"] = m
            out[f"opt.v.{p.name}"] = v
        return out

    def load_tensors(self, tensors):
        self.t = int(tensors["opt.t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = tensors[f"opt.m.{p.name}"].astype(p.data.dtype).reshape(p.data.shape)
            self.v[i] = tensors[f"opt.v.{p.name}"].astype(p.data.dtype).reshape(p.data.shape)


def draw_batch_masks(B, C, cfg: TrainConfig, panel_names, rng, present=None):
    """(B, C) observed matrix, honoring fixed targets / per-sample presence."""
    masks = np.empty((B, C), dtype=bool)
    if cfg.fixed_targets is not None:
        masks[:] = _fixed_mask(panel_names, cfg.fixed_targets, C)[None, :]
        if present is not None:
            masks &= present
        return masks
    for i in range(B):
        allowed = None if present is None else present[i]
        masks[i] = sample_mask(C, cfg.p_observed, rng, allowed=allowed)
    return masks


def masked_mse(eps_hat, eps, weights=None):
    """Loss and d(loss)/d(eps_hat). weights: per-sample-per-channel (B,C)."""
    diff = eps_hat.astype(np.float64) - eps.astype(np.float64)
    if weights is None:
        loss = float(np.mean(diff * diff))
        grad = (2.0 / diff.size) * diff
    else:
        w = weights.astype(np.float64)[:, :, None, None]
        denom = max(float(weights.sum()), 1.0) * diff.shape[2] * diff.shape[3]
        loss = float((w * diff * diff).sum() / denom)
        grad = (2.0 / denom) * w * diff
    return loss, grad.astype(eps_hat.dtype)


def build_condition(x0, masks, mask_indicator):
    cond = apply_mask_array(x0, masks)
    if mask_indicator:
        b, c, h, w = x0.shape
        ind = np.broadcast_to(
            masks.astype(np.float32)[:, :, None, None], (b, c, h, w))
        cond = np.concatenate([cond, ind], axis=1)
    return np.ascontiguousarray(cond)


def compute_loss(net, sched, x0, masks, t, eps, weighting="all"):
    """Forward-only loss for a fixed draw (validation / property tests)."""
    x_t = forward_sample(x0, t, eps, sched)
    cond = None
    if net.config.conditional:
        cond = build_condition(x0, masks, net.config.mask_indicator)
    eps_hat = net.forward(x_t, t, cond)
    weights = None
    if weighting == "masked-only":
        weights = (~masks).astype(np.float32)
    loss, _ = masked_mse(eps_hat, eps, weights)
    return loss


def training_step(net: Denoiser, adam: Adam, sched: NoiseSchedule,
                  cfg: TrainConfig, x0, rng, panel_names=None, present=None,
                  step=0):
    """One optimization step over a normalized batch; returns the loss."""
    B, C = x0.shape[0], x0.shape[1]
    cond = None
    masks = None
    if net.config.conditional:
        masks = draw_batch_masks(B, C, cfg, panel_names, rng, present=present)
        assert masks.any(axis=1).all(), "C_o >= 1 violated"
        cond = build_condition(x0, masks, net.config.mask_indicator)
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(x0.shape, dtype=np.float32).astype(x0.dtype, copy=False)
    x_t = forward_sample(x0, t, eps, sched)
    eps_hat = net.forward(x_t, t, cond)
    weights = None
    if cfg.loss_weighting == "masked-only" and masks is not None:
        weights = (~masks).astype(np.float32)
    loss, grad = masked_mse(eps_hat, eps, weights)
    if not np.isfinite(loss):
        raise NonFiniteLoss(step, t, loss)
    net.zero_grad()
    net.backward(grad)
    clip_grads_(net.params(), cfg.grad_clip)
    adam.step()
    return loss


@dataclass
class TrainResult:
    checkpoint_path: str
    loss_log_path: str
    losses: list


def train(dataset: Dataset, cfg: TrainConfig, net_cfg: NetworkConfig,
          sched: NoiseSchedule, out_dir, *, present=None, resume_from=None,
          sigma_mode="stochastic", log_every=0) -> TrainResult:
    """Run the masking loop; emits checkpoints, loss CSV, and config JSON."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "train_config.json"), "w") as f:
        json.dump({"train": cfg.to_dict(), "network": net_cfg.to_dict(),
                   "schedule": {"kind": sched.kind, "T": sched.T}}, f, indent=2)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        net = denoiser_from_checkpoint(ckpt)
        adam = Adam(net.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        adam.load_tensors(ckpt.tensors)
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        start_step = ckpt.step
    else:
        rng = np.random.default_rng(cfg.seed)
        net = Denoiser(net_cfg, sched.T, rng, dtype=np.float32)
        adam = Adam(net.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        start_step = 0

    def save(path, step):
        save_checkpoint(
            path, denoiser=net, schedule_kind=sched.kind, sigma_mode=sigma_mode,
            stats=dataset.stats, panel=dataset.panel.names,
            rng_state=rng.bit_generator.state, step=step,
            meta={"train_config": cfg.to_dict()},
            extra_tensors=adam.tensors())

    losses = []
    log_path = os.path.join(out_dir, "loss.csv")
    with open(log_path, "w", newline="") as logf:
        writer = csv.writer(logf)
        writer.writerow(["step", "loss"])
        for step in range(start_step + 1, cfg.steps + 1):
            idx = rng.integers(0, dataset.n, size=cfg.batch_size)
            x0 = np.ascontiguousarray(dataset.data[idx])
            pres = None if present is None else present[idx]
            loss = training_step(net, adam, sched, cfg, x0, rng,
                                 panel_names=dataset.panel.names,
                                 present=pres, step=step)
            losses.append(loss)
            writer.writerow([step, repr(loss)])
            if log_every and step % log_every == 0:
                print(f"step {step}: loss {loss:.5f}", flush=True)
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0 \
                    and step < cfg.steps:
                save(os.path.join(out_dir, f"ckpt_{step:07d}.mckp"), step)

    final_path = os.path.join(out_dir, "model.mckp")
    save(final_path, cfg.steps)
    return TrainResult(final_path, log_path, losses)
