"""Conv kernel backend selection.

The compiled extension is preferred when importable; the numpy im2col
fallback is selected otherwise. ``MCDIFF_BACKEND=numpy|compiled`` forces a
choice (useful for benchmarking and for testing both paths).
"""

import os

import numpy as np

from . import kernels_np

_FORCED = os.environ.get("MCDIFF_BACKEND", "").strip().lower()

_ext = None
if _FORCED != "numpy":
    try:
        from . import _ckernels as _ext
    except ImportError:
        _ext = None
        if _FORCED == "compiled":
            raise ImportError(
                "MCDIFF_BACKEND=compiled but mcdiff.nn._ckernels is not built"
            )

_impl = _ext if _ext is not None else kernels_np


def backend_name() -> str:
    return "compiled" if _impl is not kernels_np else "numpy"


def get_backends():
    """Mapping of available backend name -> kernel module (for benchmarks)."""
    out = {"numpy": kernels_np}
    if _ext is not None:
        out["compiled"] = _ext
    return out


def _c(a):
    # compiled kernels take C-contiguous memoryviews
    return np.ascontiguousarray(a)


def conv2d_fwd(x, w, b, stride, pad):
    return _impl.conv2d_fwd(_c(x), _c(w), None if b is None else _c(b), stride, pad)


def conv2d_bwd_input(dy, w, stride, pad, h, wi):
    return _impl.conv2d_bwd_input(_c(dy), _c(w), stride, pad, h, wi)


def conv2d_bwd_params(x, dy, stride, pad, k):
    return _impl.conv2d_bwd_params(_c(x), _c(dy), stride, pad, k)
