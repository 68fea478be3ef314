"""Synthetic multi-channel data with a known inter-channel dependency graph.

Latents are Gaussian random fields (white noise smoothed with a Gaussian
kernel, standardized per field). Channels are built from rules:

  linear           weighted sum of latents
  copy             exact copy of an earlier channel
  product_sigmoid  sigmoid(scale * z_j * z_l): a nonlinear pairwise interaction
  exclusive        per-pixel softmax over a group's latents (channels in one
                   group sum to 1 before noise, like mutually exclusive niches)
  noise            pure noise channel, independent of everything

Per-channel Gaussian noise is added after the rule value.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import ChannelPanel, Dataset
from .errors import BadSpec


@dataclass(frozen=True)
class SynthSpec:
    k_latents: int
    length_scale: float
    channels: tuple  # of (name, rule-dict)
    noise_sigma: tuple
    height: int
    width: int
    n_train: int
    n_val: int
    n_test: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple((str(n), dict(r)) for n, r in self.channels))
        object.__setattr__(self, "noise_sigma", tuple(float(s) for s in self.noise_sigma))
        self.validate()

    @property
    def names(self):
        return tuple(n for n, _ in self.channels)

    @property
    def n_samples(self):
        return self.n_train + self.n_val + self.n_test

    def validate(self):
        if self.k_latents < 1:
            raise BadSpec("need at least one latent field")
        if len(set(self.names)) != len(self.channels):
            raise BadSpec("channel names must be unique")
        if len(self.noise_sigma) != len(self.channels):
            raise BadSpec("noise_sigma must have one entry per channel")
        if min(self.height, self.width, self.n_samples) < 1:
            raise BadSpec("height, width, samples must be positive")
        for idx, (name, rule) in enumerate(self.channels):
            kind = rule.get("kind")
            if kind == "copy":
                if not 0 <= rule["channel"] < idx:
                    raise BadSpec(f"{name}: copy must reference an earlier channel")
            elif kind == "linear":
                if len(rule["weights"]) != self.k_latents:
                    raise BadSpec(f"{name}: linear weights must have length k")
            elif kind == "product_sigmoid":
                if not (0 <= rule["j"] < self.k_latents and 0 <= rule["l"] < self.k_latents):
                    raise BadSpec(f"{name}: product_sigmoid latents out of range")
            elif kind == "exclusive":
                if not 0 <= rule["latent"] < self.k_latents:
                    raise BadSpec(f"{name}: exclusive latent out of range")
            elif kind != "noise":
                raise BadSpec(f"{name}: unknown rule kind {kind!r}")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, raw):
        d = json.loads(raw)
        d["channels"] = tuple((n, r) for n, r in d["channels"])
        d["noise_sigma"] = tuple(d["noise_sigma"])
        return cls(**d)


def gaussian_random_fields(rng, n, k, h, w, length_scale):
    """(n, k, h, w) smooth fields, standardized per field when spatial."""
    z = rng.standard_normal((n, k, h, w))
    if length_scale > 0 and (h > 1 or w > 1):
        z = gaussian_filter(z, sigma=(0, 0, length_scale, length_scale), mode="wrap")
        flat = z.reshape(n, k, -1)
        mu = flat.mean(axis=2, keepdims=True)
        sd = flat.std(axis=2, keepdims=True)
        sd[sd == 0] = 1.0
        z = ((flat - mu) / sd).reshape(n, k, h, w)
    return z


def _softmax_groups(spec, z):
    """Precompute per-group softmax values: {group: {channel_idx: field}}."""
    groups = {}
    for idx, (_, rule) in enumerate(spec.channels):
        if rule.get("kind") == "exclusive":
            groups.setdefault(rule["group"], []).append((idx, rule))
    out = {}
    for gname, members in groups.items():
        tau = float(members[0][1].get("temperature", 2.0))
        logits = np.stack([tau * z[:, r["latent"]] for _, r in members], axis=1)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        out[gname] = {idx: probs[:, i] for i, (idx, _) in enumerate(members)}
    return out


def gen_spatial(spec: SynthSpec) -> Dataset:
    """All samples (train+val+test) as one unnormalized dataset."""
    rng = np.random.default_rng(spec.seed)
    n, h, w = spec.n_samples, spec.height, spec.width
    z = gaussian_random_fields(rng, n, spec.k_latents, h, w, spec.length_scale)
    exclusive = _softmax_groups(spec, z)
    chans = np.empty((n, len(spec.channels), h, w), dtype=np.float64)
    for idx, (name, rule) in enumerate(spec.channels):
        kind = rule["kind"]
        if kind == "linear":
            base = np.tensordot(np.asarray(rule["weights"]), z, axes=(0, 1))
        elif kind == "copy":
            base = chans[:, rule["channel"]]
        elif kind == "product_sigmoid":
            scale = float(rule.get("scale", 3.0))
            u = scale * z[:, rule["j"]] * z[:, rule["l"]]
            base = 1.0 / (1.0 + np.exp(-u))
        elif kind == "exclusive":
            base = exclusive[rule["group"]][idx]
        else:  # noise
            base = np.zeros((n, h, w))
        sigma = spec.noise_sigma[idx]
        if sigma > 0:
            base = base + sigma * rng.standard_normal((n, h, w))
        chans[:, idx] = base
    return Dataset(chans.astype(np.float32), ChannelPanel(spec.names))


def split_spatial(spec: SynthSpec):
    """Deterministic contiguous split into train/val/test datasets."""
    from dataclasses import replace

    ds = gen_spatial(spec)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return {
        "train": replace(ds, data=ds.data[:a], split="train"),
        "val": replace(ds, data=ds.data[a:b], split="val"),
        "test": replace(ds, data=ds.data[b:], split="test"),
    }


@dataclass(frozen=True)
class SingleCellSpec:
    genes: int
    proteins: int
    k_latents: int
    gene_noise: float
    protein_noise: tuple  # one sigma per protein
    n_train: int
    n_val: int
    n_test: int
    protein_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "protein_noise", tuple(float(s) for s in self.protein_noise))
        if self.genes < 1 or self.proteins < 1:
            raise BadSpec("need at least one gene and one protein channel")
        if len(self.protein_noise) != self.proteins:
            raise BadSpec("protein_noise must have one entry per protein")

    @property
    def names(self):
        return tuple([f"G{i + 1}" for i in range(self.genes)]
                     + [f"P{i + 1}" for i in range(self.proteins)])

    @property
    def n_samples(self):
        return self.n_train + self.n_val + self.n_test

    def to_json(self):
        return json.dumps(asdict(self), indent=2)


def gen_singlecell(spec: SingleCellSpec):
    """Paired gene/protein cells as a (G+P)-channel 1x1 dataset.

    Genes are linear in per-cell latents; proteins are sigmoids of latent
    combinations. Returns (dataset, observed_template) where the template
    marks genes observed and proteins missing (the canonical targets).
    """
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_samples, spec.k_latents
    z = rng.standard_normal((n, k))
    a_mat = rng.standard_normal((spec.genes, k)) / np.sqrt(k)
    b_mat = rng.standard_normal((spec.proteins, k)) / np.sqrt(k)
    genes = z @ a_mat.T
    if spec.gene_noise > 0:
        genes = genes + spec.gene_noise * rng.standard_normal(genes.shape)
    prot_lin = (z @ b_mat.T) * spec.protein_scale
    proteins = 1.0 / (1.0 + np.exp(-prot_lin))
    noise = np.asarray(spec.protein_noise)
    proteins = proteins + noise[None, :] * rng.standard_normal(proteins.shape)
    data = np.concatenate([genes, proteins], axis=1)[:, :, None, None]
    ds = Dataset(data.astype(np.float32), ChannelPanel(spec.names))
    observed = np.array([True] * spec.genes + [False] * spec.proteins)
    return ds, observed


def split_singlecell(spec: SingleCellSpec):
    from dataclasses import replace

    ds, observed = gen_singlecell(spec)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return {
        "train": replace(ds, data=ds.data[:a], split="train"),
        "val": replace(ds, data=ds.data[a:b], split="val"),
        "test": replace(ds, data=ds.data[b:], split="test"),
    }, observed


def _spatial_basic(seed=0):
    channels = (
        ("BASE", {"kind": "linear", "weights": [1, 0, 0, 0, 0]}),
        ("COPY", {"kind": "copy", "channel": 0}),
        ("MIX", {"kind": "linear", "weights": [0.8, 0.6, 0, 0, 0]}),
        ("PROD", {"kind": "product_sigmoid", "j": 0, "l": 1, "scale": 3.0}),
        ("EXA", {"kind": "exclusive", "group": "niche", "latent": 2}),
        ("EXB", {"kind": "exclusive", "group": "niche", "latent": 3}),
        ("EXC", {"kind": "exclusive", "group": "niche", "latent": 4}),
        ("IND", {"kind": "noise"}),
    )
    sigma = (0.05, 0.0, 0.05, 0.05, 0.02, 0.02, 0.02, 1.0)
    return SynthSpec(k_latents=5, length_scale=3.0, channels=channels,
                     noise_sigma=sigma, height=16, width=16,
                     n_train=2000, n_val=64, n_test=64, seed=seed)


def _spatial_pair(seed=0):
    shared = (
        ("SH_A", {"kind": "linear", "weights": [1, 0, 0, 0]}),
        ("SH_B", {"kind": "linear", "weights": [0, 1, 0, 0]}),
        ("SH_HARD", {"kind": "product_sigmoid", "j": 2, "l": 3, "scale": 3.0}),
        ("SH_MIX", {"kind": "linear", "weights": [0.6, 0, 0.8, 0]}),
    )
    a_channels = shared + (
        ("A_Z2", {"kind": "linear", "weights": [0, 0, 1, 0]}),
        ("A_N", {"kind": "noise"}),
    )
    b_channels = shared + (
        ("B_Z3", {"kind": "linear", "weights": [0, 0, 0, 1]}),
        ("B_N", {"kind": "noise"}),
    )
    sig = (0.05, 0.05, 0.05, 0.05, 0.05, 1.0)
    mk = lambda ch, sd: SynthSpec(
        k_latents=4, length_scale=3.0, channels=ch, noise_sigma=sig,
        height=16, width=16, n_train=1200, n_val=32, n_test=48, seed=sd)
    return {"A": mk(a_channels, seed + 11), "B": mk(b_channels, seed + 23)}


def _singlecell_basic(seed=0):
    return SingleCellSpec(
        genes=32, proteins=8, k_latents=6, gene_noise=0.05,
        protein_noise=(0.0, 0.0, 0.0, 0.0, 0.1, 0.1, 0.1, 0.1),
        n_train=3000, n_val=128, n_test=512, seed=seed)


def standard_presets():
    """Stable named presets used by the CLI and the acceptance suite."""
    return {
        "spatial-basic": _spatial_basic,
        "spatial-pair": _spatial_pair,
        "singlecell-basic": _singlecell_basic,
    }
