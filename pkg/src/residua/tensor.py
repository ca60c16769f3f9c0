"""Rank-4 NCHW tensor helpers and the seeded random source.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of rank 4 laid out
as (batch, channel, height, width). Every helper here returns a fresh array
and never modifies its inputs.
"""
from __future__ import annotations

import numpy as np

from .errors import ArgumentError, ShapeError

DEFAULT_DTYPE = np.float32

_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


class Rng:
    """Seeded generator backed by PCG64 (128-bit state).

    PCG64 output and numpy's ziggurat normal transform are specified bit for
    bit, so a given seed yields the same stream on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, offset: int) -> "Rng":
        return Rng(self.seed + int(offset))


def _check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a rank-4 shape, got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 array, got {getattr(x, 'shape', type(x))}")
    _check_shape(x.shape)
    return x


def tensor_fill(shape, value: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.full(_check_shape(shape), value, dtype=dtype)


def randn(shape, rng: Rng, mean: float = 0.0, std: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Gaussian tensor drawn from ``rng``; draws are made in float64 then cast."""
    if std < 0:
        raise ArgumentError(f"std must be non-negative, got {std}")
    shape = _check_shape(shape)
    z = rng.generator.standard_normal(shape)
    return (mean + std * z).astype(dtype)


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    check_tensor4(a, "a")
    check_tensor4(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ArgumentError(f"unknown op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(a, b)


def channel_concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor4(a, "a")
    check_tensor4(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    check_tensor4(x, "x")
    if pad < 0:
        raise ArgumentError(f"pad must be non-negative, got {pad}")
    if pad == 0:
        return x.copy()
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out
