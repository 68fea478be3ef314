"""The denoiser network and its checkpoint format.

A diffusion UNet over the noisy target runs in parallel with a contextual
encoder over the spatial condition. Contextual features are gated (SE) and
added into the matching-resolution encoder level and the bottleneck. Channel
attention (SE or full channel-wise self-attention) recalibrates latent
features inside UNet blocks; an extra channel-attention layer acts on the
semantic output channels.

Contextual blocks carry no normalization: their features must stay strictly
local (a one-pixel change in the condition may only touch its receptive
field), and any spatial normalization would couple distant pixels.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    BadConfig,
    BadMagic,
    LevelWeightsMissing,
    ShapeMismatch,
    TimestepOutOfRange,
    TruncatedFile,
    VersionUnsupported,
)
from .nn.layers import (
    ChannelSelfAttention,
    Conv2d,
    GroupNorm,
    Linear,
    Module,
    SEGate,
    SiLU,
    TimestepEmbed,
    Upsample2x,
)

ATTENTION_KINDS = ("none", "se", "full")
INJECTION_MODES = ("add", "se_gate")
PLACEMENTS = ("bottleneck", "all")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int
    height: int
    width: int
    levels: int = 2
    base_width: int = 32
    width_mults: tuple = (1, 2)
    unet_channel_attention: str = "se"
    attention_placement: str = "bottleneck"
    output_channel_attention: bool = True
    injection: str = "se_gate"
    se_reduction: int = 4
    attention_dim: int = 16
    temb_dim: int = 64
    conditional: bool = True
    mask_indicator: bool = False

    def __post_init__(self):
        object.__setattr__(self, "width_mults", tuple(self.width_mults))
        self.validate()

    def validate(self):
        if self.levels < 2:
            raise BadConfig(f"levels must be >= 2, got {self.levels}")
        if self.base_width < 8:
            raise BadConfig(f"base_width must be >= 8, got {self.base_width}")
        if len(self.width_mults) != self.levels:
            raise BadConfig("width_mults must have one entry per level")
        if self.unet_channel_attention not in ATTENTION_KINDS:
            raise BadConfig(f"unknown attention kind {self.unet_channel_attention!r}")
        if self.injection not in INJECTION_MODES:
            raise BadConfig(f"unknown injection mode {self.injection!r}")
        if self.attention_placement not in PLACEMENTS:
            raise BadConfig(f"unknown placement {self.attention_placement!r}")
        if self.in_channels < 1 or self.height < 1 or self.width < 1:
            raise BadConfig("in_channels, height, width must be positive")
        for w in self.level_widths():
            if w % self.se_reduction:
                raise BadConfig(
                    f"se_reduction {self.se_reduction} must divide width {w}")
        h, w = self.height, self.width
        for lvl in range(self.levels - 1):
            if (h > 1 and h % 2) or (w > 1 and w % 2):
                raise BadConfig(
                    f"spatial dims must halve cleanly; level {lvl + 1} is {h}x{w}")
            h, w = max(h // 2, 1), max(w // 2, 1)
        if self.unet_channel_attention == "full":
            if self.attention_dim < 1:
                raise BadConfig("attention_dim must be >= 1")
            for lvl, (hh, ww) in enumerate(self.level_shapes()):
                if self.attention_placement == "bottleneck" and lvl != self.levels - 1:
                    continue
                if self.attention_dim > hh * ww:
                    raise BadConfig(
                        f"attention_dim {self.attention_dim} exceeds N={hh * ww} "
                        f"at level {lvl + 1}")

    def level_widths(self):
        return tuple(self.base_width * m for m in self.width_mults)

    def level_shapes(self):
        out = []
        h, w = self.height, self.width
        for _ in range(self.levels):
            out.append((h, w))
            h, w = max(h // 2, 1), max(w // 2, 1)
        return tuple(out)

    @property
    def cond_channels(self):
        return self.in_channels * (2 if self.mask_indicator else 1)

    def to_dict(self):
        d = asdict(self)
        d["width_mults"] = list(self.width_mults)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["width_mults"] = tuple(d["width_mults"])
        return cls(**d)

    def hash(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:12]


def _gn_groups(ch):
    g = 8
    while ch % g:
        g //= 2
    return max(g, 1)


def inject_condition(d_feat, e_feat, gate, mode):
    """z = d_feat + SE(e_feat) (mode se_gate) or d_feat + e_feat (mode add)."""
    if d_feat.shape != e_feat.shape:
        raise ShapeMismatch(
            f"injection misaligned: {d_feat.shape} vs {e_feat.shape}")
    if mode == "se_gate":
        return d_feat + gate.forward(e_feat)
    return d_feat + e_feat


class ResBlock(Module):
    """Residual conv block; optional FiLM timestep modulation and attention."""

    def __init__(self, name, cin, cout, rng, dtype, temb_dim=None, attn=None,
                 use_norm=True):
        super().__init__()
        self.use_norm = use_norm
        self.gn1 = self._add_child(GroupNorm(f"{name}.gn1", cin, _gn_groups(cin), dtype)) if use_norm else None
        self.act1 = self._add_child(SiLU())
        self.conv1 = self._add_child(Conv2d(f"{name}.conv1", cin, cout, 3, rng, dtype))
        self.emb_lin = None
        if temb_dim is not None:
            self.emb_lin = self._add_child(
                Linear(f"{name}.emb", temb_dim, 2 * cout, rng, dtype, init="zero"))
        self.gn2 = self._add_child(GroupNorm(f"{name}.gn2", cout, _gn_groups(cout), dtype)) if use_norm else None
        self.act2 = self._add_child(SiLU())
        self.conv2 = self._add_child(Conv2d(f"{name}.conv2", cout, cout, 3, rng, dtype))
        self.attn = self._add_child(attn) if attn is not None else None
        self.skip = None
        if cin != cout:
            self.skip = self._add_child(
                Conv2d(f"{name}.skip", cin, cout, 1, rng, dtype))
        self._film = None

    def forward(self, x, temb=None):
        h = self.gn1.forward(x) if self.use_norm else x
        h = self.act1.forward(h)
        h = self.conv1.forward(h)
        if self.emb_lin is not None:
            if temb is None:
                raise ShapeMismatch("block expects a timestep embedding")
            ss = self.emb_lin.forward(temb)
            c = h.shape[1]
            scale, shift = ss[:, :c], ss[:, c:]
            hn = self.gn2.forward(h) if self.use_norm else h
            self._film = (hn, scale)
            h = hn * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        elif self.use_norm:
            h = self.gn2.forward(h)
        h = self.act2.forward(h)
        h = self.conv2.forward(h)
        if self.attn is not None:
            h = self.attn.forward(h)
        sk = self.skip.forward(x) if self.skip is not None else x
        return h + sk

    def backward(self, dy):
        """Returns (dx, dtemb); dtemb is None for unconditioned blocks."""
        dh = dy
        if self.attn is not None:
            dh = self.attn.backward(dh)
        dh = self.conv2.backward(dh)
        dh = self.act2.backward(dh)
        dtemb = None
        if self.emb_lin is not None:
            hn, scale = self._film
            dscale = (dh * hn).sum(axis=(2, 3))
            dshift = dh.sum(axis=(2, 3))
            dhn = dh * (1 + scale[:, :, None, None])
            dtemb = self.emb_lin.backward(np.concatenate([dscale, dshift], axis=1))
            dh = self.gn2.backward(dhn) if self.use_norm else dhn
        elif self.use_norm:
            dh = self.gn2.backward(dh)
        dh = self.conv1.backward(dh)
        dh = self.act1.backward(dh)
        if self.use_norm:
            dh = self.gn1.backward(dh)
        dsk = self.skip.backward(dy) if self.skip is not None else dy
        return dh + dsk, dtemb


class Denoiser(Module):
    """Full-panel noise predictor eps_hat(x_t, t, c)."""

    def __init__(self, config: NetworkConfig, num_timesteps: int, rng,
                 dtype=np.float32):
        super().__init__()
        self.config = config
        self.num_timesteps = num_timesteps
        self.dtype = np.dtype(dtype).type
        cfg = config
        widths = cfg.level_widths()
        shapes = cfg.level_shapes()
        L = cfg.levels
        C = cfg.in_channels
        ad = cfg.attention_dim

        self.temb = self._add_child(
            TimestepEmbed("temb", num_timesteps, cfg.temb_dim, cfg.temb_dim, rng, dtype))

        def make_attn(name, lvl, width):
            kind = cfg.unet_channel_attention
            if kind == "none":
                return None
            if cfg.attention_placement == "bottleneck" and lvl != L - 1:
                return None
            if kind == "se":
                return SEGate(name, width, cfg.se_reduction, rng, dtype)
            h, w = shapes[lvl]
            return ChannelSelfAttention(name, h * w, min(ad, h * w), rng, dtype)

        self.stem = self._add_child(Conv2d("stem", C, widths[0], 3, rng, dtype))
        self.enc_blocks = []
        self.downs = []
        for lvl in range(L):
            cin = widths[0] if lvl == 0 else widths[lvl - 1]
            blk = ResBlock(f"enc{lvl + 1}", cin, widths[lvl], rng, dtype,
                           temb_dim=cfg.temb_dim,
                           attn=make_attn(f"enc{lvl + 1}.attn", lvl, widths[lvl]))
            self.enc_blocks.append(self._add_child(blk))
            if lvl < L - 1:
                stride = 2 if shapes[lvl][0] > 1 or shapes[lvl][1] > 1 else 1
                self.downs.append(self._add_child(
                    Conv2d(f"down{lvl + 1}", widths[lvl], widths[lvl], 3, rng, dtype,
                           stride=stride)))
        self.mid_block = self._add_child(
            ResBlock("mid", widths[-1], widths[-1], rng, dtype,
                     temb_dim=cfg.temb_dim,
                     attn=make_attn("mid.attn", L - 1, widths[-1])))

        # contextual encoder: mirrors the diffusion encoder, no timestep
        # conditioning, no normalization, no attention
        if cfg.conditional:
            self.ctx_stem = self._add_child(
                Conv2d("ctx.stem", cfg.cond_channels, widths[0], 3, rng, dtype))
            self.ctx_blocks = []
            self.ctx_downs = []
            for lvl in range(L):
                cin = widths[0] if lvl == 0 else widths[lvl - 1]
                self.ctx_blocks.append(self._add_child(
                    ResBlock(f"ctx.enc{lvl + 1}", cin, widths[lvl], rng, dtype,
                             use_norm=False)))
                if lvl < L - 1:
                    stride = 2 if shapes[lvl][0] > 1 or shapes[lvl][1] > 1 else 1
                    self.ctx_downs.append(self._add_child(
                        Conv2d(f"ctx.down{lvl + 1}", widths[lvl], widths[lvl], 3,
                               rng, dtype, stride=stride)))
            self.ctx_mid = self._add_child(
                ResBlock("ctx.mid", widths[-1], widths[-1], rng, dtype,
                         use_norm=False))
            self.inj_gates = []
            for lvl in range(L + 1):
                width = widths[min(lvl, L - 1)]
                if cfg.injection == "se_gate":
                    self.inj_gates.append(self._add_child(
                        SEGate(f"inj{lvl + 1}", width, cfg.se_reduction, rng, dtype)))
                else:
                    self.inj_gates.append(None)

        self.dec_blocks = []
        self.ups = []
        for lvl in range(L - 1, -1, -1):
            blk = ResBlock(f"dec{lvl + 1}", 2 * widths[lvl], widths[lvl], rng, dtype,
                           temb_dim=cfg.temb_dim,
                           attn=make_attn(f"dec{lvl + 1}.attn", lvl, widths[lvl]))
            self.dec_blocks.append(self._add_child(blk))
            if lvl > 0:
                up = Upsample2x() if shapes[lvl - 1][0] > shapes[lvl][0] else None
                conv = Conv2d(f"up{lvl + 1}", widths[lvl], widths[lvl - 1], 3, rng, dtype)
                self.ups.append((self._add_child(up) if up else None,
                                 self._add_child(conv)))

        self.head_gn = self._add_child(
            GroupNorm("head.gn", widths[0], _gn_groups(widths[0]), dtype))
        self.head_act = self._add_child(SiLU())
        self.head_conv = self._add_child(
            Conv2d("head.conv", widths[0], C, 3, rng, dtype, init="zero"))
        if cfg.output_channel_attention:
            self.out_se = self._add_child(
                SEGate("out.se", C, min(cfg.se_reduction, C), rng, dtype))
            self.out_conv = self._add_child(
                Conv2d("out.conv", C, C, 1, rng, dtype, init="zero"))

        self._cache = None

    # ------------------------------------------------------------------
    def attention_for_level(self, lvl):
        blk = self.enc_blocks[lvl].attn
        if blk is None:
            raise LevelWeightsMissing(f"no attention projections at level {lvl + 1}")
        return blk

    def contextual_encode(self, cond):
        """Per-level contextual features e_1..e_L plus the bottleneck feature."""
        cfg = self.config
        if not cfg.conditional:
            raise BadConfig("network was built without a conditional branch")
        if cond.shape[1:] != (cfg.cond_channels, cfg.height, cfg.width):
            raise ShapeMismatch(
                f"condition shape {cond.shape[1:]} vs expected "
                f"({cfg.cond_channels}, {cfg.height}, {cfg.width})")
        feats = []
        h = self.ctx_stem.forward(cond)
        for lvl in range(cfg.levels):
            h = self.ctx_blocks[lvl].forward(h)
            feats.append(h)
            if lvl < cfg.levels - 1:
                h = self.ctx_downs[lvl].forward(h)
        feats.append(self.ctx_mid.forward(h))
        return feats

    def _backward_contextual(self, dfeats):
        cfg = self.config
        dh = self.ctx_mid.backward(dfeats[-1])[0]
        for lvl in range(cfg.levels - 1, -1, -1):
            if lvl < cfg.levels - 1:
                dh = self.ctx_downs[lvl].backward(dh)
            dh = dh + dfeats[lvl]
            dh = self.ctx_blocks[lvl].backward(dh)[0]
        self.ctx_stem.backward(dh)

    def forward(self, x_t, t, cond=None):
        """Predict the full C-channel noise for x_t at timestep(s) t."""
        cfg = self.config
        if x_t.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ShapeMismatch(
                f"x_t shape {x_t.shape[1:]} vs expected "
                f"({cfg.in_channels}, {cfg.height}, {cfg.width})")
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t_arr.shape[0] == 1 and x_t.shape[0] > 1:
            t_arr = np.full(x_t.shape[0], int(t_arr[0]), dtype=np.int64)
        if t_arr.shape[0] != x_t.shape[0]:
            raise ShapeMismatch("t must be scalar or one entry per sample")
        if np.any(t_arr < 1) or np.any(t_arr > self.num_timesteps):
            raise TimestepOutOfRange(
                f"t in [1, {self.num_timesteps}] required, got {t_arr}")

        temb = self.temb.forward(t_arr)

        e_feats = None
        if cfg.conditional:
            if cond is None:
                raise ShapeMismatch("conditional network requires a condition")
            e_feats = self.contextual_encode(cond)

        h = self.stem.forward(x_t)
        skips = []
        for lvl in range(cfg.levels):
            h = self.enc_blocks[lvl].forward(h, temb)
            if e_feats is not None:
                h = inject_condition(h, e_feats[lvl], self.inj_gates[lvl],
                                     cfg.injection)
            skips.append(h)
            if lvl < cfg.levels - 1:
                h = self.downs[lvl].forward(h)
        h = self.mid_block.forward(h, temb)
        if e_feats is not None:
            h = inject_condition(h, e_feats[-1], self.inj_gates[-1], cfg.injection)

        for i, lvl in enumerate(range(cfg.levels - 1, -1, -1)):
            h = np.concatenate([h, skips[lvl]], axis=1)
            h = self.dec_blocks[i].forward(h, temb)
            if lvl > 0:
                up, conv = self.ups[i]
                if up is not None:
                    h = up.forward(h)
                h = conv.forward(h)

        h = self.head_gn.forward(h)
        h = self.head_act.forward(h)
        y = self.head_conv.forward(h)
        if cfg.output_channel_attention:
            y = y + self.out_conv.forward(self.out_se.forward(y))
        self._cache = {"had_cond": e_feats is not None}
        return y

    def backward(self, dy):
        """Accumulate parameter gradients for the last forward pass."""
        cfg = self.config
        had_cond = self._cache["had_cond"]
        if cfg.output_channel_attention:
            dy = dy + self.out_se.backward(self.out_conv.backward(dy))
        dh = self.head_conv.backward(dy)
        dh = self.head_act.backward(dh)
        dh = self.head_gn.backward(dh)

        dtemb_total = None

        def add_temb(dt):
            nonlocal dtemb_total
            if dt is not None:
                dtemb_total = dt if dtemb_total is None else dtemb_total + dt

        dskips = [None] * cfg.levels
        dfeats = [None] * (cfg.levels + 1) if had_cond else None
        # decoder ran blocks in order i=0..L-1 with ups[i] after block i<L-1;
        # unwind in reverse execution order
        for i in range(cfg.levels - 1, -1, -1):
            lvl = cfg.levels - 1 - i
            dh, dt = self.dec_blocks[i].backward(dh)
            add_temb(dt)
            w = dh.shape[1] // 2
            dskips[lvl] = dh[:, w:]
            dh = np.ascontiguousarray(dh[:, :w])
            if i > 0:
                up, conv = self.ups[i - 1]
                dh = conv.backward(dh)
                if up is not None:
                    dh = up.backward(dh)
        # walk encoder levels in reverse, threading skip gradients
        if had_cond and self.inj_gates[-1] is not None:
            dfeats[-1] = self.inj_gates[-1].backward(dh)
        elif had_cond:
            dfeats[-1] = dh
        dh, dt = self.mid_block.backward(dh)
        add_temb(dt)
        for lvl in range(cfg.levels - 1, -1, -1):
            if lvl < cfg.levels - 1:
                dh = self.downs[lvl].backward(dh)
            dh = dh + dskips[lvl]
            if had_cond:
                gate = self.inj_gates[lvl]
                dfeats[lvl] = gate.backward(dh) if gate is not None else dh.copy()
            dh, dt = self.enc_blocks[lvl].backward(dh)
            add_temb(dt)
        self.stem.backward(dh)
        if had_cond:
            self._backward_contextual(dfeats)
        if dtemb_total is not None:
            self.temb.backward(dtemb_total)


def count_params(config: NetworkConfig, num_timesteps: int = 10) -> int:
    """Total learnable scalar count for a config (pure function of the config)."""
    rng = np.random.default_rng(0)
    net = Denoiser(config, num_timesteps, rng, dtype=np.float32)
    return sum(p.data.size for p in net.params())


# ----------------------------------------------------------------------
# checkpoint IO

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1
_DTYPE_CODES = {0: "<f4", 1: "<f8"}
_DTYPE_BY_NAME = {"float32": 0, "float64": 1}


@dataclass
class Checkpoint:
    config: NetworkConfig
    schedule_kind: str
    num_timesteps: int
    sigma_mode: str
    stats: "object"
    panel: tuple | None
    rng_state: dict | None
    step: int
    tensors: dict
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, *, denoiser: Denoiser, schedule_kind: str,
                    sigma_mode: str = "stochastic", stats=None, panel=None,
                    rng_state=None, step=0, meta=None, extra_tensors=None):
    header = {
        "network": denoiser.config.to_dict(),
        "schedule": {"kind": schedule_kind, "T": denoiser.num_timesteps,
                     "sigma_mode": sigma_mode},
        "normalization": stats.to_dict() if stats is not None else None,
        "panel": list(panel) if panel is not None else None,
        "rng_state": rng_state,
        "step": int(step),
        "meta": meta or {},
    }
    tensors = {p.name: p.data for p in denoiser.params()}
    if extra_tensors:
        tensors.update(extra_tensors)
    raw_header = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(raw_header)))
        f.write(raw_header)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nm = name.encode("utf-8")
            code = _DTYPE_BY_NAME[str(arr.dtype)]
            f.write(struct.pack("<I", len(nm)))
            f.write(nm)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def _read_exact(f, n, what):
    raw = f.read(n)
    if len(raw) != n:
        raise TruncatedFile(f"checkpoint ended while reading {what}")
    return raw


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise BadMagic("not a checkpoint file")
        version, hlen = struct.unpack("<II", _read_exact(f, 8, "header length"))
        if version != CKPT_VERSION:
            raise VersionUnsupported(f"checkpoint version {version}")
        header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, ln, "name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(f, 2, "dtype/ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            nbytes = int(np.prod(shape, dtype=np.int64)) * int(_DTYPE_CODES[code][-1])
            data = np.frombuffer(_read_exact(f, nbytes, name), dtype=_DTYPE_CODES[code])
            tensors[name] = data.reshape(shape).copy()
    from .data import NormalizationStats

    stats = header.get("normalization")
    return Checkpoint(
        config=NetworkConfig.from_dict(header["network"]),
        schedule_kind=header["schedule"]["kind"],
        num_timesteps=int(header["schedule"]["T"]),
        sigma_mode=header["schedule"].get("sigma_mode", "stochastic"),
        stats=NormalizationStats.from_dict(stats) if stats else None,
        panel=tuple(header["panel"]) if header.get("panel") else None,
        rng_state=header.get("rng_state"),
        step=int(header.get("step", 0)),
        tensors=tensors,
        meta=header.get("meta", {}),
    )


def denoiser_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Denoiser:
    rng = np.random.default_rng(0)
    net = Denoiser(ckpt.config, ckpt.num_timesteps, rng, dtype=dtype)
    for p in net.params():
        if p.name not in ckpt.tensors:
            raise ShapeMismatch(f"checkpoint missing tensor {p.name}")
        arr = ckpt.tensors[p.name]
        if arr.shape != p.data.shape:
            raise ShapeMismatch(
                f"tensor {p.name}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data[...] = arr.astype(p.data.dtype)
    return net
