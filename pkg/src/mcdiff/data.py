"""Multi-channel samples, panels, masks, normalization, tiling, container IO.

On-disk container (``.mct``): magic ``MCT1``, little-endian u32 header
(version, N, C, H, W), C length-prefixed UTF-8 channel names, then N*C*H*W
float32 values in C-order (sample-major, then channel-major). An optional
JSON trailer (u32 length + bytes) after the payload carries the split tag
and normalization statistics so a single file round-trips a Dataset
bit-exactly; files without the trailer are plain tensor containers.
"""

import json
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    EmptyObservedSet,
    PanelCountMismatch,
    SizeTooLarge,
    TruncatedFile,
    UnknownChannel,
    VersionUnsupported,
)

log = logging.getLogger(__name__)

MAGIC = b"MCT1"
CONTAINER_VERSION = 1


@dataclass(frozen=True)
class ChannelPanel:
    """Ordered, unique channel names."""

    names: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise DimMismatch("panel must have at least one channel")
        if any(not n for n in names):
            raise DimMismatch("channel names must be non-empty")
        if len(set(names)) != len(names):
            raise DimMismatch("channel names must be unique")

    @property
    def count(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownChannel(f"{name!r} not in panel {self.names}") from None


@dataclass(frozen=True)
class MultiChannelSample:
    """One C x H x W float32 tensor bound to a panel."""

    data: np.ndarray
    panel: ChannelPanel

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 3:
            raise DimMismatch(f"sample must be CxHxW, got shape {data.shape}")
        if data.shape[0] != self.panel.count:
            raise DimMismatch(
                f"{data.shape[0]} channels vs panel count {self.panel.count}")
        if not np.all(np.isfinite(data)):
            raise DimMismatch("sample contains non-finite values")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ChannelMask:
    """Boolean observed-vector partitioning a panel into S_o and S_m."""

    observed: np.ndarray

    def __post_init__(self):
        obs = np.ascontiguousarray(self.observed, dtype=bool)
        object.__setattr__(self, "observed", obs)
        if obs.ndim != 1:
            raise DimMismatch("mask must be a 1-D boolean vector")

    @classmethod
    def from_missing(cls, panel: ChannelPanel, missing_names):
        observed = np.ones(panel.count, dtype=bool)
        for name in missing_names:
            observed[panel.index(name)] = False
        return cls(observed)

    @property
    def n_observed(self):
        return int(self.observed.sum())

    @property
    def n_missing(self):
        return int((~self.observed).sum())

    def require_observed(self):
        if self.n_observed < 1:
            raise EmptyObservedSet("condition requires at least one observed channel")


@dataclass(frozen=True)
class Condition:
    """Spatially aligned condition: observed channels kept, the rest zeroed."""

    data: np.ndarray
    mask: ChannelMask

    def with_indicator(self):
        """Append C binary mask-indicator channels (1 = observed)."""
        c, h, w = self.data.shape
        ind = np.broadcast_to(
            self.mask.observed.astype(np.float32)[:, None, None], (c, h, w))
        return np.concatenate([self.data, ind], axis=0)


def apply_mask(x: MultiChannelSample, mask: ChannelMask) -> Condition:
    """Zero-fill the masked channels of x (Algorithm-1 condition builder)."""
    if mask.observed.shape[0] != x.panel.count:
        raise DimMismatch(
            f"mask length {mask.observed.shape[0]} vs panel {x.panel.count}")
    mask.require_observed()
    data = x.data * mask.observed[:, None, None].astype(np.float32)
    return Condition(data=data, mask=mask)


def apply_mask_array(data: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Batched zero-fill: data (B,C,H,W) * observed (B,C) or (C,)."""
    obs = np.asarray(observed, dtype=np.float32)
    if obs.ndim == 1:
        obs = obs[None, :]
    if obs.shape[1] != data.shape[1]:
        raise DimMismatch(f"mask width {obs.shape[1]} vs {data.shape[1]} channels")
    return data * obs[:, :, None, None]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel clip value and post-clip min/max, plus degenerate flags."""

    clip_percentile: float
    clip: np.ndarray
    mn: np.ndarray
    mx: np.ndarray
    degenerate: np.ndarray

    def __post_init__(self):
        for name in ("clip", "mn", "mx"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "degenerate", np.asarray(self.degenerate, dtype=bool))

    def to_dict(self):
        return {
            "clip_percentile": self.clip_percentile,
            "clip": self.clip.tolist(),
            "min": self.mn.tolist(),
            "max": self.mx.tolist(),
            "degenerate": self.degenerate.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            clip_percentile=float(d["clip_percentile"]),
            clip=np.asarray(d["clip"], dtype=np.float64),
            mn=np.asarray(d["min"], dtype=np.float64),
            mx=np.asarray(d["max"], dtype=np.float64),
            degenerate=np.asarray(d["degenerate"], dtype=bool),
        )

    def same_as(self, other) -> bool:
        return (
            other is not None
            and self.clip_percentile == other.clip_percentile
            and np.array_equal(self.clip, other.clip)
            and np.array_equal(self.mn, other.mn)
            and np.array_equal(self.mx, other.mx)
            and np.array_equal(self.degenerate, other.degenerate)
        )


@dataclass(frozen=True)
class Dataset:
    """Stack of same-shape samples sharing one panel."""

    data: np.ndarray  # (N, C, H, W) float32
    panel: ChannelPanel
    split: str = "train"
    stats: NormalizationStats | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 4:
            raise DimMismatch(f"dataset must be NxCxHxW, got {data.shape}")
        if data.shape[1] != self.panel.count:
            raise DimMismatch(
                f"{data.shape[1]} channels vs panel count {self.panel.count}")

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    @property
    def samples(self):
        return [MultiChannelSample(self.data[i], self.panel) for i in range(self.n)]

    def sample(self, i) -> MultiChannelSample:
        return MultiChannelSample(self.data[i], self.panel)

    def subset(self, indices):
        return replace(self, data=self.data[np.asarray(indices)])

    def select_channels(self, names):
        idx = [self.panel.index(n) for n in names]
        stats = self.stats
        if stats is not None:
            stats = NormalizationStats(
                clip_percentile=stats.clip_percentile,
                clip=stats.clip[idx], mn=stats.mn[idx], mx=stats.mx[idx],
                degenerate=stats.degenerate[idx])
        return Dataset(self.data[:, idx], ChannelPanel(tuple(names)),
                       split=self.split, stats=stats)


def compute_normalization(d: Dataset, clip_percentile: float) -> NormalizationStats:
    """Per-channel percentile clip + min/max stats from a (train) split."""
    if not 0.5 < clip_percentile <= 1.0:
        raise ValueError(f"clip_percentile must be in (0.5, 1], got {clip_percentile}")
    c = d.panel.count
    clip = np.empty(c)
    mn = np.empty(c)
    mx = np.empty(c)
    degenerate = np.zeros(c, dtype=bool)
    for i in range(c):
        vals = d.data[:, i].astype(np.float64).ravel()
        q = float(np.quantile(vals, clip_percentile))
        lo = float(vals.min())
        hi = min(float(vals.max()), q)
        clip[i], mn[i], mx[i] = q, lo, hi
        if hi <= lo:
            degenerate[i] = True
            log.warning("channel %r is degenerate (constant after clipping)",
                        d.panel.names[i])
    return NormalizationStats(clip_percentile, clip, mn, mx, degenerate)


def apply_normalization(d: Dataset, stats: NormalizationStats) -> Dataset:
    """Clip at the stored percentile value, then min-max scale to [0,1]."""
    c = d.panel.count
    if stats.clip.shape[0] != c:
        raise DimMismatch("stats channel count differs from dataset panel")
    out = np.empty_like(d.data)
    for i in range(c):
        if stats.degenerate[i]:
            out[:, i] = 0.0
            continue
        span = stats.mx[i] - stats.mn[i]
        ch = np.minimum(d.data[:, i].astype(np.float64), stats.clip[i])
        out[:, i] = ((ch - stats.mn[i]) / span).astype(np.float32)
    return Dataset(out, d.panel, split=d.split, stats=stats)


def normalize_per_channel(d: Dataset, clip_percentile: float = 0.99) -> Dataset:
    """Compute stats on d and apply them (use apply_normalization for val/test)."""
    if d.stats is not None:
        raise ValueError("dataset already carries normalization stats")
    return apply_normalization(d, compute_normalization(d, clip_percentile))


def tile(x: MultiChannelSample, size: int, stride: int):
    """Row-major size x size tiles; trailing partial tiles are dropped."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    c, h, w = x.data.shape
    if size > h or size > w:
        raise SizeTooLarge(f"tile size {size} exceeds image {h}x{w}")
    out = []
    for i in range(0, h - size + 1, stride):
        for j in range(0, w - size + 1, stride):
            out.append(MultiChannelSample(
                np.ascontiguousarray(x.data[:, i:i + size, j:j + size]), x.panel))
    return out


def tile_dataset(d: Dataset, size: int, stride: int) -> Dataset:
    tiles = []
    for i in range(d.n):
        tiles.extend(t.data for t in tile(d.sample(i), size, stride))
    return Dataset(np.stack(tiles), d.panel, split=d.split, stats=d.stats)


# ----------------------------------------------------------------------
# container IO


def write_container(d: Dataset, path):
    """Write a Dataset to one MCT1 file (header + names + f32 payload + trailer)."""
    if d.n == 0:
        raise ValueError("refusing to write an empty dataset")
    n, c, h, w = d.data.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", CONTAINER_VERSION, n, c, h, w))
        for name in d.panel.names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
        f.write(np.ascontiguousarray(d.data, dtype="<f4").tobytes())
        meta = {"split": d.split}
        if d.stats is not None:
            meta["normalization"] = d.stats.to_dict()
        raw = json.dumps(meta).encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)


def _read_exact(f, nbytes, what):
    raw = f.read(nbytes)
    if len(raw) != nbytes:
        raise TruncatedFile(f"file ended while reading {what}")
    return raw


def read_container(path) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
        version, n, c, h, w = struct.unpack("<5I", _read_exact(f, 20, "header"))
        if version != CONTAINER_VERSION:
            raise VersionUnsupported(f"container version {version}")
        names = []
        for _ in range(c):
            (ln,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            names.append(_read_exact(f, ln, "channel name").decode("utf-8"))
        try:
            panel = ChannelPanel(tuple(names))
        except DimMismatch as e:
            raise PanelCountMismatch(str(e)) from None
        if panel.count != c:
            raise PanelCountMismatch(f"header says C={c}, names block has {panel.count}")
        payload = _read_exact(f, n * c * h * w * 4, "tensor payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w).copy()
        split, stats = "train", None
        trailer_len = f.read(4)
        if len(trailer_len) == 4:
            (ln,) = struct.unpack("<I", trailer_len)
            meta = json.loads(_read_exact(f, ln, "metadata trailer").decode("utf-8"))
            split = meta.get("split", "train")
            if "normalization" in meta:
                stats = NormalizationStats.from_dict(meta["normalization"])
        elif len(trailer_len) != 0:
            raise TruncatedFile("dangling bytes after payload")
    return Dataset(data, panel, split=split, stats=stats)


def save_dataset_dir(splits: dict, out_dir, extra=None):
    """Write one container per split plus a manifest.json."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    files = {}
    panel = None
    norm = None
    for split, ds in splits.items():
        fname = f"{split}.mct"
        write_container(replace(ds, split=split), os.path.join(out_dir, fname))
        files[split] = fname
        panel = ds.panel
        if ds.stats is not None:
            norm = ds.stats.to_dict()
    manifest = {
        "files": files,
        "panel": list(panel.names),
        "normalization": norm,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_dataset_dir(data_dir, split) -> Dataset:
    import os

    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    if split not in manifest["files"]:
        raise FileNotFoundError(f"split {split!r} not in manifest: {list(manifest['files'])}")
    return read_container(os.path.join(data_dir, manifest["files"][split]))
