"""Skip-connected convolutional autoencoder built on :mod:`residua.nn`.

Default layer table (kernel k, stride s, filters f)::

    x1   conv   k11 s2 f32   <- input          H/2
    x2   conv   k9  s2 f64   <- x1             H/4
    x3   conv   k7  s2 f128  <- x2             H/8
    x4   conv   k5  s1 f128  <- x3             H/8
    x5   conv   k3  s1 f128  <- x4             H/8
    x6   convT  k3  s1 f128  <- x5             H/8
    x7   convT  k5  s2 f128  <- x6 ++ x3       H/4
    x8   convT  k7  s2 f64   <- x7 ++ x2       H/2
    x9   convT  k9  s2 f32   <- x8 ++ x1       H
    out  conv   k11 s1 f1    <- x9             H   (linear, no batch norm)

Every layer except ``out`` is followed by batch norm and ReLU.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import nn
from .errors import ArgumentError, ShapeError, StateError
from .tensor import Rng, check_tensor4

MIN_SIZE = 24
INPUT = "input"

_BN_KEYS = ("gamma", "beta", "running_mean", "running_var")
LEARNABLE_SUFFIXES = ("weight", "bias", "gamma", "beta")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "conv_transpose"
    kernel: int
    stride: int
    filters: int
    inputs: tuple[str, ...]
    normalized: bool = True


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[LayerSpec, ...]
    input_channels: int = 1
    downsample_factor: int = field(default=0)

    def __post_init__(self):
        factor = validate_architecture(self.layers, self.input_channels)
        if self.downsample_factor == 0:
            object.__setattr__(self, "downsample_factor", factor)
        elif self.downsample_factor != factor:
            raise ShapeError(f"declared downsample factor {self.downsample_factor} != computed {factor}")

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def in_channels(self, spec: LayerSpec) -> int:
        return sum(self.input_channels if src == INPUT else self.layer(src).filters
                   for src in spec.inputs)


def validate_architecture(layers, input_channels: int = 1) -> int:
    """Check a layer list and return its total downsample factor.

    Rejects unknown kinds, even kernels, forward references, skip
    concatenations across different resolutions, and any stride composition
    whose output resolution differs from the input's.
    """
    if not layers:
        raise ShapeError("architecture has no layers")
    scale = {INPUT: Fraction(1)}
    for spec in layers:
        if spec.kind not in ("conv", "conv_transpose"):
            raise ShapeError(f"layer {spec.name}: unknown kind {spec.kind!r}")
        if spec.kernel < 1 or spec.kernel % 2 == 0:
            raise ShapeError(f"layer {spec.name}: kernel must be odd, got {spec.kernel}")
        if spec.stride < 1 or spec.filters < 1:
            raise ShapeError(f"layer {spec.name}: stride and filters must be >= 1")
        if spec.name in scale:
            raise ShapeError(f"duplicate layer name {spec.name}")
        if not 1 <= len(spec.inputs) <= 2:
            raise ShapeError(f"layer {spec.name}: expected one or two inputs, got {len(spec.inputs)}")
        missing = [src for src in spec.inputs if src not in scale]
        if missing:
            raise ShapeError(f"layer {spec.name}: unknown or later input(s) {missing}")
        scales = {scale[src] for src in spec.inputs}
        if len(scales) != 1:
            raise ShapeError(f"layer {spec.name}: concatenated inputs have different resolutions")
        (s_in,) = scales
        s_out = s_in / spec.stride if spec.kind == "conv" else s_in * spec.stride
        scale[spec.name] = s_out
    last = layers[-1]
    if scale[last.name] != 1:
        raise ShapeError(f"output resolution is {scale[last.name]} x input, expected 1")
    if last.filters != input_channels:
        raise ShapeError(f"output has {last.filters} channels, input has {input_channels}")
    factor = 1
    for s in scale.values():
        factor = math.lcm(factor, s.denominator)
    return factor


def build_default_architecture() -> ArchitectureSpec:
    L = LayerSpec
    return ArchitectureSpec(layers=(
        L("x1", "conv", 11, 2, 32, (INPUT,)),
        L("x2", "conv", 9, 2, 64, ("x1",)),
        L("x3", "conv", 7, 2, 128, ("x2",)),
        L("x4", "conv", 5, 1, 128, ("x3",)),
        L("x5", "conv", 3, 1, 128, ("x4",)),
        L("x6", "conv_transpose", 3, 1, 128, ("x5",)),
        L("x7", "conv_transpose", 5, 2, 128, ("x6", "x3")),
        L("x8", "conv_transpose", 7, 2, 64, ("x7", "x2")),
        L("x9", "conv_transpose", 9, 2, 32, ("x8", "x1")),
        L("out", "conv", 11, 1, 1, ("x9",), normalized=False),
    ), input_channels=1)


class ParamStore(dict):
    """Name -> tensor map; ``version`` increases whenever an optimizer updates it."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.version = 0

    @property
    def dtype(self):
        return next(iter(self.values())).dtype

    def learnable(self) -> list[str]:
        return sorted(k for k in self if k.rsplit(".", 1)[1] in LEARNABLE_SUFFIXES)

    def copy(self) -> "ParamStore":
        out = ParamStore({k: v.copy() for k, v in self.items()})
        out.version = self.version
        return out

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self.items()})


def expected_shapes(arch: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for spec in arch.layers:
        in_c = arch.in_channels(spec)
        shapes[f"{spec.name}.weight"] = (spec.filters, in_c, spec.kernel, spec.kernel)
        shapes[f"{spec.name}.bias"] = (spec.filters,)
        if spec.normalized:
            for key in _BN_KEYS:
                shapes[f"{spec.name}.{key}"] = (spec.filters,)
    return shapes


def check_params(arch: ArchitectureSpec, params) -> None:
    want = expected_shapes(arch)
    if set(want) != set(params):
        extra = sorted(set(params) - set(want))
        missing = sorted(set(want) - set(params))
        raise ShapeError(f"parameter names do not match architecture (missing {missing}, extra {extra})")
    for name, shape in want.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: shape {tuple(params[name].shape)} != expected {shape}")


def init_params(arch: ArchitectureSpec, rng: Rng, dtype=np.float32) -> ParamStore:
    """He-normal weights (std = sqrt(2 / fan_in), fan_in = in_c * k * k); zero biases."""
    store = ParamStore()
    for spec in arch.layers:
        in_c = arch.in_channels(spec)
        std = math.sqrt(2.0 / (in_c * spec.kernel * spec.kernel))
        shape = (spec.filters, in_c, spec.kernel, spec.kernel)
        store[f"{spec.name}.weight"] = (std * rng.generator.standard_normal(shape)).astype(dtype)
        store[f"{spec.name}.bias"] = np.zeros(spec.filters, dtype=dtype)
        if spec.normalized:
            store[f"{spec.name}.gamma"] = np.ones(spec.filters, dtype=dtype)
            store[f"{spec.name}.beta"] = np.zeros(spec.filters, dtype=dtype)
            store[f"{spec.name}.running_mean"] = np.zeros(spec.filters, dtype=dtype)
            store[f"{spec.name}.running_var"] = np.ones(spec.filters, dtype=dtype)
    return store


def _conv_params(spec: LayerSpec, params) -> nn.ConvParams:
    return nn.ConvParams(params[f"{spec.name}.weight"], params[f"{spec.name}.bias"], spec.stride)


def _bn_state(spec: LayerSpec, params, mode: str) -> nn.BatchNormState:
    # shares arrays with the store so running-stat updates land in place
    return nn.BatchNormState(*(params[f"{spec.name}.{k}"] for k in _BN_KEYS), mode=mode)


@dataclass
class ForwardCache:
    arch: ArchitectureSpec
    mode: str
    params_id: int
    params_version: int
    inputs: dict = field(default_factory=dict)  # layer -> concatenated input
    pre_norm: dict = field(default_factory=dict)  # layer -> conv output
    pre_act: dict = field(default_factory=dict)  # layer -> batch-norm output


def check_input(arch: ArchitectureSpec, x: np.ndarray) -> None:
    check_tensor4(x, "x")
    if x.shape[1] != arch.input_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, model expects {arch.input_channels}")
    f = arch.downsample_factor
    problems = []
    for label, size in (("height", x.shape[2]), ("width", x.shape[3])):
        if size % f:
            problems.append(f"{label} {size} is not divisible by {f}")
        elif size < MIN_SIZE:
            problems.append(f"{label} {size} is below the minimum {MIN_SIZE}")
    if problems:
        raise ShapeError("input " + "; ".join(problems))


def forward(arch: ArchitectureSpec, params: ParamStore, x: np.ndarray, mode: str = "eval"):
    """Run the network; returns (reconstruction, cache).

    Train mode normalizes with batch statistics and updates the running
    statistics held in ``params``. Eval mode leaves ``params`` untouched.
    """
    if mode not in ("train", "eval"):
        raise ArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    check_input(arch, x)
    x = np.ascontiguousarray(x, dtype=params.dtype)
    cache = ForwardCache(arch, mode, id(params), getattr(params, "version", 0))
    acts = {INPUT: x}
    for spec in arch.layers:
        srcs = [acts[s] for s in spec.inputs]
        inp = srcs[0] if len(srcs) == 1 else np.concatenate(srcs, axis=1)
        p = _conv_params(spec, params)
        if spec.kind == "conv":
            z = nn.conv2d_forward(inp, p)
        else:
            z = nn.conv_transpose2d_forward(inp, p)
        cache.inputs[spec.name] = inp
        cache.pre_norm[spec.name] = z
        if spec.normalized:
            a = nn.batchnorm_forward(z, _bn_state(spec, params, mode))
            cache.pre_act[spec.name] = a
            acts[spec.name] = nn.relu(a)
        else:
            acts[spec.name] = z
    return acts[arch.layers[-1].name], cache


def backward(arch: ArchitectureSpec, params: ParamStore, cache: ForwardCache, grad_recon: np.ndarray) -> ParamStore:
    """Gradients of a scalar loss with respect to every learnable tensor."""
    if cache.mode != "train":
        raise StateError("backward needs a cache from a train-mode forward pass")
    if cache.arch != arch:
        raise StateError("cache was produced by a different architecture")
    if cache.params_id != id(params) or cache.params_version != getattr(params, "version", 0):
        raise StateError("cache is stale: parameters changed since the forward pass")
    last = arch.layers[-1].name
    if grad_recon.shape != cache.pre_norm[last].shape:
        raise ShapeError(f"grad shape {grad_recon.shape} != output shape {cache.pre_norm[last].shape}")

    grads = ParamStore()
    pending = {last: grad_recon.astype(params.dtype, copy=False)}
    for spec in reversed(arch.layers):
        g = pending.pop(spec.name, None)
        if g is None:
            g = np.zeros_like(cache.pre_norm[spec.name] if not spec.normalized else cache.pre_act[spec.name])
        if spec.normalized:
            g = nn.relu_backward(cache.pre_act[spec.name], g)
            g, grads[f"{spec.name}.gamma"], grads[f"{spec.name}.beta"] = nn.batchnorm_backward(
                cache.pre_norm[spec.name], _bn_state(spec, params, "train"), g)
        p = _conv_params(spec, params)
        inp = cache.inputs[spec.name]
        if spec.kind == "conv":
            g_in, gw, gb = nn.conv2d_backward(inp, p, g)
        else:
            g_in, gw, gb = nn.conv_transpose2d_backward(inp, p, g)
        grads[f"{spec.name}.weight"] = gw
        grads[f"{spec.name}.bias"] = gb
        offset = 0
        for src in spec.inputs:
            width = arch.input_channels if src == INPUT else arch.layer(src).filters
            if src != INPUT:
                part = g_in[:, offset:offset + width]
                if src in pending:
                    pending[src] = pending[src] + part
                else:
                    pending[src] = part
            offset += width
    return grads
