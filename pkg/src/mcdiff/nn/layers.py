"""Neural-net building blocks with explicit forward/backward passes.

Every module caches what its backward needs during forward, so a module
instance must appear exactly once in a network graph. Gradients accumulate
into ``Param.grad``; callers zero them between steps.
"""

import math

import numpy as np
from scipy.special import expit

from ..errors import ShapeMismatch
from . import backend


class Param:
    """Named tensor with an accumulated gradient of the same shape."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name, data):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)


class Module:
    def __init__(self):
        self._params = []
        self._children = []

    def _add_param(self, name, data):
        p = Param(name, data)
        self._params.append(p)
        return p

    def _add_child(self, child):
        self._children.append(child)
        return child

    def params(self):
        out = list(self._params)
        for c in self._children:
            out.extend(c.params())
        return out

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0


def he_normal(rng, shape, fan_in, dtype, scale=1.0):
    std = scale * math.sqrt(2.0 / fan_in)
    return rng.standard_normal(shape, dtype=np.float64).astype(dtype) * dtype(std)


def normal(rng, shape, std, dtype):
    return rng.standard_normal(shape, dtype=np.float64).astype(dtype) * dtype(std)


class Conv2d(Module):
    """3x3/1x1 convolution, zero padding k//2, optional stride."""

    def __init__(self, name, cin, cout, k, rng, dtype, stride=1, bias=True,
                 init="he"):
        super().__init__()
        self.k, self.stride, self.pad = k, stride, k // 2
        if init == "zero":
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = he_normal(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.w = self._add_param(f"{name}.w", w)
        self.b = self._add_param(f"{name}.b", np.zeros(cout, dtype=dtype)) if bias else None
        self._x = None

    def forward(self, x):
        self._x = x
        return backend.conv2d_fwd(x, self.w.data,
                                  None if self.b is None else self.b.data,
                                  self.stride, self.pad)

    def backward(self, dy):
        x = self._x
        dw, db = backend.conv2d_bwd_params(x, dy, self.stride, self.pad, self.k)
        self.w.grad += dw
        if self.b is not None:
            self.b.grad += db
        return backend.conv2d_bwd_input(dy, self.w.data, self.stride, self.pad,
                                        x.shape[2], x.shape[3])


class Linear(Module):
    def __init__(self, name, fin, fout, rng, dtype, bias=True, init="he", std=None):
        super().__init__()
        if init == "zero":
            w = np.zeros((fin, fout), dtype=dtype)
        elif std is not None:
            w = normal(rng, (fin, fout), std, dtype)
        else:
            w = he_normal(rng, (fin, fout), fin, dtype)
        self.w = self._add_param(f"{name}.w", w)
        self.b = self._add_param(f"{name}.b", np.zeros(fout, dtype=dtype)) if bias else None
        self._x = None

    def forward(self, x):
        self._x = x
        y = x @ self.w.data
        if self.b is not None:
            y += self.b.data
        return y

    def backward(self, dy):
        self.w.grad += self._x.T @ dy
        if self.b is not None:
            self.b.grad += dy.sum(axis=0)
        return dy @ self.w.data.T


class GroupNorm(Module):
    """Group normalization over (channel-group, H, W) with affine params."""

    def __init__(self, name, ch, groups, dtype, eps=1e-5):
        super().__init__()
        if ch % groups:
            raise ShapeMismatch(f"channels {ch} not divisible by groups {groups}")
        self.groups, self.eps = groups, eps
        self.gamma = self._add_param(f"{name}.gamma", np.ones(ch, dtype=dtype))
        self.beta = self._add_param(f"{name}.beta", np.zeros(ch, dtype=dtype))
        self._cache = None

    def forward(self, x):
        b, c, h, w = x.shape
        g = self.groups
        xg = x.reshape(b, g, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * inv).reshape(b, c, h, w)
        self._cache = (xhat, inv, x.shape)
        return xhat * self.gamma.data[:, None, None] + self.beta.data[:, None, None]

    def backward(self, dy):
        xhat, inv, shape = self._cache
        b, c, h, w = shape
        g = self.groups
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = (dy * self.gamma.data[:, None, None]).reshape(b, g, -1)
        xhat_g = xhat.reshape(b, g, -1)
        m = dxhat.shape[2]
        s1 = dxhat.sum(axis=2, keepdims=True)
        s2 = (dxhat * xhat_g).sum(axis=2, keepdims=True)
        dx = (inv / m) * (m * dxhat - s1 - xhat_g * s2)
        return dx.reshape(shape)


class SiLU(Module):
    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x):
        s = expit(x)
        self._cache = (x, s)
        return x * s

    def backward(self, dy):
        x, s = self._cache
        return dy * (s * (1 + x * (1 - s)))


class SEGate(Module):
    """Squeeze-and-excitation: GAP -> bottleneck MLP -> sigmoid channel scale.

    Gate values are strictly inside (0,1); with all-zero weights the gate
    is exactly 0.5 for every channel.
    """

    def __init__(self, name, ch, reduction, rng, dtype):
        super().__init__()
        hidden = max(1, ch // reduction)
        self.w1 = self._add_param(f"{name}.w1", he_normal(rng, (ch, hidden), ch, dtype))
        self.b1 = self._add_param(f"{name}.b1", np.zeros(hidden, dtype=dtype))
        self.w2 = self._add_param(f"{name}.w2", he_normal(rng, (hidden, ch), hidden, dtype))
        self.b2 = self._add_param(f"{name}.b2", np.zeros(ch, dtype=dtype))
        self._cache = None
        self.last_gates = None

    def forward(self, z):
        b, d, h, w = z.shape
        alpha = z.mean(axis=(2, 3))
        h1 = alpha @ self.w1.data + self.b1.data
        hr = np.maximum(h1, 0)
        gate = expit(hr @ self.w2.data + self.b2.data)
        self.last_gates = gate
        self._cache = (z, alpha, h1, hr, gate)
        return z * gate[:, :, None, None]

    def backward(self, dy):
        z, alpha, h1, hr, gate = self._cache
        hw = z.shape[2] * z.shape[3]
        dz = dy * gate[:, :, None, None]
        dgate = (dy * z).sum(axis=(2, 3))
        dpre = dgate * gate * (1 - gate)
        self.w2.grad += hr.T @ dpre
        self.b2.grad += dpre.sum(axis=0)
        dhr = dpre @ self.w2.data.T
        dh1 = dhr * (h1 > 0)
        self.w1.grad += alpha.T @ dh1
        self.b1.grad += dh1.sum(axis=0)
        dalpha = dh1 @ self.w1.data.T
        dz += dalpha[:, :, None, None] / dy.dtype.type(hw)
        return dz


def softmax_lastdim(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class ChannelSelfAttention(Module):
    """Self-attention across latent channels with a residual connection.

    Features are flattened to (D, N); the N-dimensional spatial axis is
    projected to an inner dim d, attention weights are (D, D) row-stochastic.
    Projections are resolution-bound, so one instance serves one level.
    """

    def __init__(self, name, n_spatial, d_inner, rng, dtype):
        super().__init__()
        self.n, self.d = n_spatial, d_inner
        sq = 1.0 / math.sqrt(n_spatial)
        self.wq = self._add_param(f"{name}.wq", normal(rng, (n_spatial, d_inner), sq, dtype))
        self.wk = self._add_param(f"{name}.wk", normal(rng, (n_spatial, d_inner), sq, dtype))
        self.wv = self._add_param(f"{name}.wv", normal(rng, (n_spatial, d_inner), sq, dtype))
        self.wo = self._add_param(
            f"{name}.wo", normal(rng, (d_inner, n_spatial), 1.0 / math.sqrt(d_inner), dtype))
        self._cache = None
        self.last_attn = None

    def forward(self, z):
        b, dd, h, w = z.shape
        if h * w != self.n:
            raise ShapeMismatch(f"attention built for N={self.n}, got {h}x{w}")
        x = z.reshape(b, dd, self.n)
        q = x @ self.wq.data
        k = x @ self.wk.data
        v = x @ self.wv.data
        scores = q @ k.transpose(0, 2, 1) / np.float64(math.sqrt(self.d)).astype(z.dtype)
        attn = softmax_lastdim(scores)
        self.last_attn = attn
        u = attn @ v
        out = u @ self.wo.data
        self._cache = (x, q, k, v, attn, u, z.shape)
        return z + out.reshape(z.shape)

    def backward(self, dy):
        x, q, k, v, attn, u, shape = self._cache
        b = x.shape[0]
        dout = dy.reshape(b, -1, self.n)
        self.wo.grad += np.einsum("bdk,bdn->kn", u, dout, optimize=True)
        du = dout @ self.wo.data.T
        dattn = du @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ du
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        ds /= np.float64(math.sqrt(self.d)).astype(dy.dtype)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        self.wq.grad += np.einsum("bdn,bdk->nk", x, dq, optimize=True)
        self.wk.grad += np.einsum("bdn,bdk->nk", x, dk, optimize=True)
        self.wv.grad += np.einsum("bdn,bdk->nk", x, dv, optimize=True)
        dx = dq @ self.wq.data.T + dk @ self.wk.data.T + dv @ self.wv.data.T
        return dy + dx.reshape(shape)


class Upsample2x(Module):
    """Nearest-neighbour 2x upsampling."""

    def __init__(self):
        super().__init__()

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        b, c, h2, w2 = dy.shape
        return dy.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def sinusoidal_table(num_steps, dim, dtype):
    """Fixed (num_steps+1, dim) sin/cos embedding table for timesteps 0..T."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(1, half - 1))
    args = np.arange(num_steps + 1, dtype=np.float64)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if table.shape[1] < dim:
        table = np.pad(table, ((0, 0), (0, dim - table.shape[1])))
    return table.astype(dtype)


class TimestepEmbed(Module):
    """Sinusoidal table followed by a two-layer MLP."""

    def __init__(self, name, num_steps, sin_dim, out_dim, rng, dtype):
        super().__init__()
        self.table = sinusoidal_table(num_steps, sin_dim, dtype)
        self.lin1 = self._add_child(Linear(f"{name}.lin1", sin_dim, out_dim, rng, dtype))
        self.act = self._add_child(SiLU())
        self.lin2 = self._add_child(Linear(f"{name}.lin2", out_dim, out_dim, rng, dtype))

    def forward(self, t_idx):
        e = self.table[t_idx]
        return self.lin2.forward(self.act.forward(self.lin1.forward(e)))

    def backward(self, demb):
        self.lin1.backward(self.act.backward(self.lin2.backward(demb)))


def global_grad_norm(params):
    total = 0.0
    for p in params:
        g = p.grad
        total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grads_(params, max_norm):
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= p.grad.dtype.type(scale)
    return norm
