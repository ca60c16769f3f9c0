"""Normal-only training: minibatch MSE reconstruction loss with Adam."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model, nn
from .errors import ArgumentError, DataError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ArgumentError(f"batch_size must be >= 2 for batch statistics, got {self.batch_size}")
        if self.lr < 0:
            raise ArgumentError(f"lr must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ArgumentError(f"{name} must lie in (0, 1)")
        if self.eps <= 0:
            raise ArgumentError("eps must be positive")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: model.ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        names = params.learnable() if hasattr(params, "learnable") else sorted(params)
        return cls(
            m={k: np.zeros_like(params[k]) for k in names},
            v={k: np.zeros_like(params[k]) for k in names},
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "AdamState":
        return cls.create(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def adam_step(params, grads, state: AdamState):
    """One Adam update of every tensor tracked by ``state``, in place.

    Tensors without optimizer state (batch-norm running statistics) are left
    alone. Returns ``(params, state)``.
    """
    if set(grads) != set(state.m):
        raise ShapeError(f"gradient names do not match optimizer state: "
                         f"{sorted(set(grads) ^ set(state.m))}")
    for name, g in grads.items():
        if g.shape != state.m[name].shape or params[name].shape != g.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] -= step.astype(params[name].dtype, copy=False)
    if hasattr(params, "version"):
        params.version += 1
    return params, state


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def append(self, loss: float, secs: float) -> None:
        self.losses.append(float(loss))
        self.seconds.append(float(secs))

    def __len__(self):
        return len(self.losses)

    def to_text(self, with_time: bool = True) -> str:
        lines = ["# epoch\tmean_loss\tseconds"]
        for i, (loss, secs) in enumerate(zip(self.losses, self.seconds), start=1):
            lines.append(f"{i}\t{loss:.9g}\t{secs:.3f}" if with_time else f"{i}\t{loss:.9g}\t-")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainLog":
        out = cls()
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            _, loss, secs = line.split("\t")
            out.append(float(loss), float("nan") if secs == "-" else float(secs))
        return out


class ArraySource:
    """In-memory image source: an (N, H, W) or (N, 1, H, W) array plus labels."""

    def __init__(self, images, labels=None, ids=None):
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[:, None]
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"expected (N, H, W) or (N, 1, H, W) images, got {images.shape}")
        self.images = images
        self.labels = list(labels) if labels is not None else ["normal"] * len(images)
        self.ids = list(ids) if ids is not None else [f"image{i}" for i in range(len(images))]
        self.loaded = []

    def records(self):
        return list(zip(self.ids, self.labels))

    def load(self, ident):
        self.loaded.append(ident)
        return self.images[self.ids.index(ident), 0]


def _load_training_images(arch, source) -> np.ndarray:
    records = source.records()
    if not records:
        raise DataError("training set is empty")
    for ident, label in records:
        if label != "normal":
            raise DataError(f"training set contains a non-normal record: {ident} ({label})")
    images = []
    for ident, _ in records:
        img = np.asarray(source.load(ident))
        try:
            model.check_input(arch, img[None, None])
        except ShapeError as exc:
            raise ShapeError(f"{ident}: {exc}") from None
        images.append(img)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"training images have differing sizes: {sorted(shapes)}")
    return np.stack(images)[:, None]


def train(arch, params, train_set, cfg: TrainConfig | None = None, state: AdamState | None = None,
          on_epoch=None):
    """Fit ``params`` to reconstruct the normal images of ``train_set``.

    ``train_set`` is any object with ``records() -> [(id, label)]`` and
    ``load(id) -> (H, W) array`` (see :class:`ArraySource` and
    :class:`residua.data.ManifestSource`). Labels are checked before any image
    is read, so anomalous records are never loaded. ``params`` is updated in
    place. Returns ``(params, state, log)``.
    """
    cfg = cfg or TrainConfig()
    data = _load_training_images(arch, train_set).astype(params.dtype, copy=False)
    state = state or AdamState.from_config(params, cfg)
    history = TrainLog()
    n = len(data)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cfg.shuffle:
            order = np.random.Generator(np.random.PCG64(cfg.seed + epoch)).permutation(n)
        else:
            order = np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            recon, cache = model.forward(arch, params, batch, mode="train")
            loss, grad = nn.mse_loss(recon, batch)
            grads = model.backward(arch, params, cache, grad)
            adam_step(params, grads, state)
            total += loss * len(batch)
        history.append(total / n, time.perf_counter() - t0)
        log.info("epoch %d/%d loss %.6g (%.1fs)", epoch + 1, cfg.epochs, history.losses[-1], history.seconds[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, history)
    return params, state, history
