"""Layer kernels with hand-written gradients.

Convolutions use cross-correlation orientation with ``pad = k // 2``. A
strided convolution maps an (h, w) map to (h / stride, w / stride); the
transposed convolution is its exact adjoint and maps back up by ``stride``
(equivalent to ``output_padding = stride - 1``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArgumentError, ShapeError
from .tensor import check_tensor4

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class ConvParams:
    """Weights of a convolution or transposed convolution.

    ``weight`` has shape (out_c, in_c, k, k) for both kinds, where in_c is the
    number of channels the layer consumes.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"weight must be (out_c, in_c, k, k), got {self.weight.shape}")
        if self.kernel % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {self.kernel}")
        if self.bias.shape != (self.out_c,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_c={self.out_c}")
        if self.stride < 1:
            raise ArgumentError(f"stride must be >= 1, got {self.stride}")

    @property
    def out_c(self) -> int:
        return self.weight.shape[0]

    @property
    def in_c(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def pad(self) -> int:
        return self.kernel // 2


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ArgumentError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ArgumentError(f"eps must be positive, got {self.eps}")
        if self.mode not in ("train", "eval"):
            raise ArgumentError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class GradPair:
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")


def _check_conv_input(x, p: ConvParams, name="x"):
    check_tensor4(x, name)
    if x.shape[1] != p.in_c:
        raise ShapeError(f"{name} has {x.shape[1]} channels, layer expects {p.in_c}")


def _down_size(h: int, w: int, p: ConvParams) -> tuple[int, int]:
    s = p.stride
    if h % s or w % s:
        raise ShapeError(f"spatial size {h}x{w} is not divisible by stride {s}")
    return h // s, w // s


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    _check_conv_input(x, p)
    _down_size(x.shape[2], x.shape[3], p)
    out = kernels.corr_forward(x, p.weight, p.stride, p.pad)
    out += p.bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return (grad_x, grad_weight, grad_bias) for :func:`conv2d_forward`."""
    _check_conv_input(x, p)
    n, c, h, w = x.shape
    ho, wo = _down_size(h, w, p)
    if grad_out.shape != (n, p.out_c, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {(n, p.out_c, ho, wo)}")
    grad_x = kernels.corr_grad_input(grad_out, p.weight, h, w, p.stride, p.pad)
    grad_w = kernels.corr_grad_weight(x, grad_out, p.kernel, p.stride, p.pad)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b.astype(p.bias.dtype)


def _adjoint_weight(p: ConvParams) -> np.ndarray:
    # the forward correlation whose adjoint this transposed layer computes
    return np.ascontiguousarray(p.weight.swapaxes(0, 1))


def conv_transpose2d_forward(x: np.ndarray, p: ConvParams, output_pad: int | None = None) -> np.ndarray:
    _check_conv_input(x, p)
    if output_pad is not None and output_pad != p.stride - 1:
        raise ArgumentError(f"output_pad must equal stride - 1 = {p.stride - 1}, got {output_pad}")
    n, c, h, w = x.shape
    big_h, big_w = h * p.stride, w * p.stride
    out = kernels.corr_grad_input(x, _adjoint_weight(p), big_h, big_w, p.stride, p.pad)
    out += p.bias.reshape(1, -1, 1, 1)
    return out


def conv_transpose2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return (grad_x, grad_weight, grad_bias) for :func:`conv_transpose2d_forward`."""
    _check_conv_input(x, p)
    n, c, h, w = x.shape
    big_h, big_w = h * p.stride, w * p.stride
    if grad_out.shape != (n, p.out_c, big_h, big_w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {(n, p.out_c, big_h, big_w)}")
    grad_x = kernels.corr_forward(grad_out, _adjoint_weight(p), p.stride, p.pad)
    grad_w = kernels.corr_grad_weight(grad_out, x, p.kernel, p.stride, p.pad).swapaxes(0, 1)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, np.ascontiguousarray(grad_w), grad_b.astype(p.bias.dtype)


def batchnorm_forward(x: np.ndarray, s: BatchNormState) -> np.ndarray:
    """Normalize per channel. In train mode the running statistics in ``s`` are updated."""
    check_tensor4(x, "x")
    if x.shape[1] != s.channels:
        raise ShapeError(f"x has {x.shape[1]} channels, batch norm has {s.channels}")
    shape = (1, -1, 1, 1)
    if s.mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("train-mode batch norm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = ((x - mean.reshape(shape)) ** 2).mean(axis=(0, 2, 3))
        m = s.momentum
        s.running_mean[:] = (1 - m) * s.running_mean + m * mean
        s.running_var[:] = (1 - m) * s.running_var + m * var * (count / (count - 1))
    else:
        mean, var = s.running_mean, s.running_var
    inv_std = 1.0 / np.sqrt(var + s.eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    return (xhat * s.gamma.reshape(shape) + s.beta.reshape(shape)).astype(x.dtype, copy=False)


def batchnorm_backward(x: np.ndarray, s: BatchNormState, grad_out: np.ndarray):
    """Gradients of train-mode batch norm, including the batch-statistic terms.

    Returns (grad_x, grad_gamma, grad_beta). Statistics are recomputed from
    ``x``, so ``s`` is only read.
    """
    check_tensor4(x, "x")
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != x shape {x.shape}")
    shape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    mean = x.mean(axis=axes)
    xc = x - mean.reshape(shape)
    var = (xc ** 2).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + s.eps)
    xhat = xc * inv_std.reshape(shape)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    grad_x = (s.gamma * inv_std).reshape(shape) / count * (
        count * grad_out - grad_beta.reshape(shape) - xhat * grad_gamma.reshape(shape)
    )
    dt = s.gamma.dtype
    return grad_x.astype(x.dtype, copy=False), grad_gamma.astype(dt), grad_beta.astype(dt)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != x shape {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)
