"""Residual maps, thresholding, threshold selection and pixel-level F1."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArgumentError, FormatError, ShapeError

DEFAULT_GRID_SIZE = 64
GUTTER = 4
GUTTER_VALUE = 128


@dataclass
class ResidualMap:
    values: np.ndarray
    source: str | None = None

    @property
    def shape(self):
        return self.values.shape

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


def _values(r) -> np.ndarray:
    return r.values if isinstance(r, ResidualMap) else np.asarray(r)


def _squeeze2d(a, name) -> np.ndarray:
    a = np.asarray(a)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a single 2-D image, got shape {a.shape}")
    return a


def residual_map(x, recon, source: str | None = None) -> ResidualMap:
    """Signed per-pixel residual ``x - recon``."""
    x = _squeeze2d(x, "x")
    recon = _squeeze2d(recon, "recon")
    if x.shape != recon.shape:
        raise ShapeError(f"image shape {x.shape} != reconstruction shape {recon.shape}")
    return ResidualMap(x - recon, source)


def apply_threshold(r, t: float) -> np.ndarray:
    """Binary mask (uint8) marking pixels with ``|r| > t``."""
    if t < 0:
        raise ArgumentError(f"threshold must be non-negative, got {t}")
    return (np.abs(_values(r)) > t).astype(np.uint8)


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    granularity: str = "aggregate"
    source: str | None = None

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.tn + other.tn, "aggregate")

    def to_text(self) -> str:
        rows = [("tp", self.tp), ("fp", self.fp), ("fn", self.fn), ("tn", self.tn),
                ("precision", f"{self.precision:.6f}"), ("recall", f"{self.recall:.6f}"),
                ("f1", f"{self.f1:.6f}")]
        return "".join(f"{k}\t{v}\n" for k, v in rows)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("\t")
                kv[key] = value
        try:
            return cls(int(kv["tp"]), int(kv["fp"]), int(kv["fn"]), int(kv["tn"]))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed evaluation report: {exc}") from exc


def confusion(pred, truth) -> EvalReport:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return EvalReport(tp, fp, fn, pred.size - tp - fp - fn, "per_image")


def evaluate(pred_masks, truth_masks, granularity: str = "aggregate"):
    """Pixel-level confusion counts and P/R/F1.

    ``aggregate`` sums counts over all images before computing the ratios
    (micro averaging) and returns one report; ``per_image`` returns a list.
    """
    pred_masks, truth_masks = list(pred_masks), list(truth_masks)
    if len(pred_masks) != len(truth_masks):
        raise ArgumentError(f"{len(pred_masks)} predictions vs {len(truth_masks)} ground truths")
    if granularity not in ("aggregate", "per_image"):
        raise ArgumentError(f"granularity must be 'aggregate' or 'per_image', got {granularity!r}")
    reports = [confusion(p, t) for p, t in zip(pred_masks, truth_masks)]
    if granularity == "per_image":
        return reports
    total = EvalReport(0, 0, 0, 0, "aggregate")
    for rep in reports:
        total = total + rep
    return total


@dataclass
class ThresholdPolicy:
    """How to choose the binarization level for |R|.

    kind "fixed" uses ``value``; "stat" uses mean + k * std of |R| over normal
    residuals; "sweep" picks the grid value with the best aggregate F1 (ties
    go to the larger threshold). A sweep without an explicit grid uses
    ``grid_size`` evenly spaced values on [0, max |R|].
    """

    kind: str = "sweep"
    value: float | None = None
    k: float | None = None
    grid: tuple | None = None
    grid_size: int = DEFAULT_GRID_SIZE

    def __post_init__(self):
        if self.kind == "fixed":
            if self.value is None or self.value < 0:
                raise ArgumentError("fixed policy needs a threshold >= 0")
        elif self.kind == "stat":
            if self.k is None:
                raise ArgumentError("stat policy needs k")
        elif self.kind == "sweep":
            if self.grid is not None:
                g = np.asarray(self.grid, dtype=float)
                if g.size == 0 or np.any(np.diff(g) <= 0) or g[0] < 0:
                    raise ArgumentError("sweep grid must be non-empty, non-negative and strictly increasing")
                self.grid = tuple(float(v) for v in g)
            elif self.grid_size < 1:
                raise ArgumentError("grid_size must be >= 1")
        else:
            raise ArgumentError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "ThresholdPolicy":
        """Parse ``fixed:T``, ``stat:K``, ``sweep`` or ``sweep:N`` (N grid points)."""
        kind, _, arg = text.partition(":")
        try:
            if kind == "fixed":
                return cls("fixed", value=float(arg))
            if kind == "stat":
                return cls("stat", k=float(arg))
            if kind == "sweep":
                return cls("sweep", grid_size=int(arg)) if arg else cls("sweep")
        except ValueError:
            pass
        raise ArgumentError(f"cannot parse threshold policy {text!r}")


def default_grid(residuals, size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    top = max(float(np.abs(_values(r)).max()) for r in residuals)
    return np.linspace(0.0, top, size)


def sweep_table(residuals, truths, grid) -> list[tuple[float, EvalReport]]:
    """Aggregate report at every grid threshold."""
    residuals, truths = list(residuals), list(truths)
    if len(residuals) != len(truths) or not residuals:
        raise ArgumentError("sweep needs at least one residual map with a ground truth each")
    grid = np.asarray(grid, dtype=np.float64)
    tp = np.zeros(len(grid), dtype=np.int64)
    fp = np.zeros(len(grid), dtype=np.int64)
    pos = 0
    total = 0
    for r, t in zip(residuals, truths):
        mag = np.abs(_values(r)).astype(np.float64).ravel()
        truth = np.asarray(t).astype(bool).ravel()
        if mag.shape != truth.shape:
            raise ShapeError(f"residual shape {_values(r).shape} != truth shape {np.shape(t)}")
        on = np.sort(mag[truth])
        off = np.sort(mag[~truth])
        # count of values strictly greater than each threshold
        tp += on.size - np.searchsorted(on, grid, side="right")
        fp += off.size - np.searchsorted(off, grid, side="right")
        pos += on.size
        total += mag.size
    out = []
    for i, t in enumerate(grid):
        fn = pos - tp[i]
        tn = total - pos - fp[i]
        out.append((float(t), EvalReport(int(tp[i]), int(fp[i]), int(fn), int(tn))))
    return out


def select_threshold(policy: ThresholdPolicy, residuals, truths=None) -> float:
    residuals = list(residuals)
    if policy.kind == "fixed":
        return float(policy.value)
    if policy.kind == "stat":
        if not residuals:
            raise ArgumentError("stat policy needs at least one normal residual map")
        mags = np.concatenate([np.abs(_values(r)).astype(np.float64).ravel() for r in residuals])
        return float(mags.mean() + policy.k * mags.std())
    if truths is None:
        raise ArgumentError("sweep policy needs ground-truth masks")
    truths = list(truths)
    grid = policy.grid if policy.grid is not None else default_grid(residuals, policy.grid_size)
    table = sweep_table(residuals, truths, grid)
    best_t, best_f1 = None, -1.0
    for t, rep in table:
        if rep.f1 >= best_f1:  # later (larger) thresholds win ties
            best_t, best_f1 = t, rep.f1
    return best_t


def overlay_panels(x, r, mask, truth=None) -> list[np.ndarray]:
    x = _squeeze2d(x, "x")
    mag = np.abs(_values(r))
    top = float(mag.max())
    heat = mag / top if top > 0 else np.zeros_like(mag)
    panels = [x, heat, np.asarray(mask, dtype=np.float64)]
    if truth is not None:
        panels.append(np.asarray(truth, dtype=np.float64))
    for p in panels:
        if p.shape != x.shape:
            raise ShapeError(f"panel shape {p.shape} != image shape {x.shape}")
    return panels


def emit_overlay(x, r, mask, truth=None, path=None, gutter: int = GUTTER) -> np.ndarray:
    """Compose input | |R| heat | predicted mask [| truth] side by side.

    Returns the 8-bit canvas and writes it as PNG when ``path`` is given.
    """
    panels = overlay_panels(x, r, mask, truth)
    h, w = panels[0].shape
    n = len(panels)
    canvas = np.full((h, n * w + (n - 1) * gutter), GUTTER_VALUE, dtype=np.uint8)
    for i, p in enumerate(panels):
        col = i * (w + gutter)
        canvas[:, col:col + w] = np.clip(np.rint(np.asarray(p, dtype=np.float64) * 255.0), 0, 255)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(canvas, mode="L").save(path, format="PNG")
    return canvas


def reconstruct_residuals(arch, params, images, sources=None) -> list[ResidualMap]:
    """Eval-mode residual map for each 2-D image, one forward pass per image."""
    from . import model

    out = []
    sources = list(sources) if sources is not None else [None] * len(images)
    for img, src in zip(images, sources):
        x = np.asarray(img, dtype=np.float32)[None, None]
        recon, _ = model.forward(arch, params, x, mode="eval")
        out.append(residual_map(x, recon, src))
    return out
