"""Cross-correlation primitives shared by the convolution layers.

The compiled extension (``residua._conv``) is used when it imports; otherwise
the numpy implementation in ``residua._conv_py`` is used. Set
``RESIDUA_PURE_PYTHON=1`` to force the fallback.

Each primitive picks one of two strategies. Layers with at most
``DIRECT_MAX_MAPS`` output maps run direct loops; everything else gathers
patches with im2col and hands the product to BLAS.
"""
import os

import numpy as np

from . import _conv_py

DIRECT_MAX_MAPS = 4

_impl = _conv_py
BACKEND = "python"
if os.environ.get("RESIDUA_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _conv as _impl
    except ImportError:  # extension not built
        _impl = _conv_py
    else:
        BACKEND = "cython"


def use_backend(name: str) -> None:
    """Switch between "cython" and "python" at runtime (benchmarks, tests)."""
    global _impl, BACKEND
    if name == "python":
        _impl = _conv_py
    elif name == "cython":
        from . import _conv
        _impl = _conv
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def im2col(x, k, stride, pad):
    return _impl.im2col(x, k, stride, pad)


def col2im(cols, c, h, w, k, stride, pad):
    return _impl.col2im(cols, c, h, w, k, stride, pad)


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _direct(maps: int, strategy: str | None) -> bool:
    if strategy is None:
        return maps <= DIRECT_MAX_MAPS
    if strategy not in ("direct", "gemm"):
        raise ValueError(f"unknown strategy {strategy!r}")
    return strategy == "direct"


def corr_forward(x, weight, stride, pad, strategy=None):
    """Batched strided cross-correlation, (n, c, h, w) -> (n, o, ho, wo), no bias."""
    x = np.ascontiguousarray(x)
    weight = np.ascontiguousarray(weight, dtype=x.dtype)
    o, c, k, _ = weight.shape
    if _direct(o, strategy):
        return _impl.direct_forward(x, weight, stride, pad)
    n, _, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    w2 = weight.reshape(o, -1)
    out = np.empty((n, o, ho, wo), dtype=x.dtype)
    for i in range(n):
        out[i] = (w2 @ _impl.im2col(x[i], k, stride, pad)).reshape(o, ho, wo)
    return out


def corr_grad_input(grad_out, weight, h, w, stride, pad, strategy=None):
    """Adjoint of :func:`corr_forward` in its input; maps (n, o, ho, wo) -> (n, c, h, w)."""
    grad_out = np.ascontiguousarray(grad_out)
    weight = np.ascontiguousarray(weight, dtype=grad_out.dtype)
    o, c, k, _ = weight.shape
    if _direct(o, strategy):
        return _impl.direct_grad_input(grad_out, weight, h, w, stride, pad)
    n = grad_out.shape[0]
    w2t = np.ascontiguousarray(weight.reshape(o, -1).T)
    out = np.empty((n, c, h, w), dtype=grad_out.dtype)
    for i in range(n):
        cols = w2t @ grad_out[i].reshape(o, -1)
        out[i] = _impl.col2im(cols, c, h, w, k, stride, pad)
    return out


def corr_grad_weight(x, grad_out, k, stride, pad, strategy=None):
    """Gradient of :func:`corr_forward` in its weight; returns (o, c, k, k)."""
    x = np.ascontiguousarray(x)
    grad_out = np.ascontiguousarray(grad_out, dtype=x.dtype)
    n, c = x.shape[:2]
    o = grad_out.shape[1]
    if _direct(o, strategy):
        return _impl.direct_grad_weight(x, grad_out, k, stride, pad)
    gw = np.zeros((o, c * k * k), dtype=x.dtype)
    for i in range(n):
        gw += grad_out[i].reshape(o, -1) @ _impl.im2col(x[i], k, stride, pad).T
    return gw.reshape(o, c, k, k)
