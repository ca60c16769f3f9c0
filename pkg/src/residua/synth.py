"""Seeded synthetic defect textures for desk-scale runs.

Each image is a mid-gray base plus two oriented sinusoids with per-image
random phase, plus Gaussian noise, clipped to [0, 1]. Anomalous images add one
thin random-walk scratch whose pixels are shifted by ``defect_delta`` (random
sign); the ground-truth mask is exactly the shifted pixels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, ImageRecord, save_grayscale, save_mask, to_uint8, write_manifest
from .errors import ArgumentError


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    # (cycles per pixel, orientation in degrees, amplitude) for the two sinusoids
    wave1: tuple = (0.09, 30.0, 0.12)
    wave2: tuple = (0.16, 115.0, 0.08)
    jitter: float = 0.1  # relative per-image jitter of frequency and amplitude
    noise_sigma: float = 0.03
    defect_delta: float = 0.35
    length_range: tuple = (15, 40)
    width_range: tuple = (1, 2)
    n_train: int = 200
    n_val: int = 20
    n_val_anomalous: int = 10
    n_test_normal: int = 50
    n_test_anomalous: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.height % 8 or self.width % 8 or self.height < 24 or self.width < 24:
            raise ArgumentError(f"image size must be multiples of 8 and >= 24, got {self.height}x{self.width}")
        for wave in (self.wave1, self.wave2):
            if abs(wave[2]) * (1 + self.jitter) > 0.15 + 1e-12:
                raise ArgumentError("sinusoid amplitudes (with jitter) must not exceed 0.15")
        if abs(self.defect_delta) < 3 * self.noise_sigma:
            raise ArgumentError("defect intensity delta must be at least 3 noise sigmas")
        if self.noise_sigma < 0:
            raise ArgumentError("noise_sigma must be non-negative")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ArgumentError(f"bad defect length range {self.length_range}")
        lo, hi = self.width_range
        if not 1 <= lo <= hi:
            raise ArgumentError(f"bad defect width range {self.width_range}")
        for name in ("n_train", "n_val", "n_val_anomalous", "n_test_normal", "n_test_anomalous"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be non-negative")


def render_texture(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    img = np.full((cfg.height, cfg.width), 0.5)
    for freq, angle, amp in (cfg.wave1, cfg.wave2):
        f = freq * (1 + cfg.jitter * rng.uniform(-1, 1))
        a = amp * (1 + cfg.jitter * rng.uniform(-1, 1))
        theta = math.radians(angle)
        phase = rng.uniform(0, 2 * math.pi)
        img += a * np.sin(2 * math.pi * f * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    img += cfg.noise_sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def render_defect_mask(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Rasterize a random-walk polyline of the configured length and width."""
    h, w = cfg.height, cfg.width
    length = rng.uniform(*cfg.length_range)
    width = rng.uniform(*cfg.width_range)
    margin = 4.0
    y, x = rng.uniform(margin, h - margin), rng.uniform(margin, w - margin)
    heading = rng.uniform(0, 2 * math.pi)
    points = [(y, x)]
    remaining = length
    while remaining > 0:
        step = min(3.0, remaining)
        heading += rng.normal(0.0, 0.35)
        ny, nx = y + step * math.sin(heading), x + step * math.cos(heading)
        if not (margin <= ny <= h - margin and margin <= nx <= w - margin):
            heading += math.pi  # turn back inside the frame
            ny, nx = y + step * math.sin(heading), x + step * math.cos(heading)
        y, x = ny, nx
        points.append((y, x))
        remaining -= step
    samples = []
    for (y0, x0), (y1, x1) in zip(points[:-1], points[1:]):
        n = max(2, int(math.ceil(math.hypot(y1 - y0, x1 - x0) / 0.25)) + 1)
        t = np.linspace(0.0, 1.0, n)
        samples.append(np.stack([y0 + (y1 - y0) * t, x0 + (x1 - x0) * t], axis=1))
    pts = np.concatenate(samples)
    radius = width / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    centers = np.stack([yy.ravel() + 0.5, xx.ravel() + 0.5], axis=1)
    mask = np.zeros(h * w, dtype=bool)
    # pixel centers within radius of the sampled polyline
    for chunk in np.array_split(pts, max(1, len(pts) // 64)):
        d2 = ((centers[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=2)
        mask |= (d2 <= radius * radius).any(axis=1)
    return mask.reshape(h, w).astype(np.uint8)


def render_sample(cfg: SynthConfig, rng: np.random.Generator, anomalous: bool):
    """Return (clean, observed, mask) as 8-bit arrays.

    ``observed`` equals ``clean`` except on mask pixels for anomalous samples.
    """
    clean = to_uint8(render_texture(cfg, rng))
    if not anomalous:
        return clean, clean.copy(), np.zeros_like(clean)
    mask = render_defect_mask(cfg, rng)
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    shifted = to_uint8(np.clip(clean / 255.0 + sign * abs(cfg.defect_delta), 0.0, 1.0))
    observed = np.where(mask == 1, shifted, clean)
    # a pixel that cannot move (already at the clip limit) is not a defect pixel
    mask = (observed != clean).astype(np.uint8)
    return clean, observed, mask


def gen_synthetic(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write images, masks and ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    plan = [
        ("train", "normal", cfg.n_train),
        ("val", "normal", cfg.n_val),
        ("val", "anomalous", cfg.n_val_anomalous),
        ("test", "normal", cfg.n_test_normal),
        ("test", "anomalous", cfg.n_test_anomalous),
    ]
    records = []
    for group, (split, label, count) in enumerate(plan):
        for i in range(count):
            # one stream per image keeps files independent of the other counts
            rng = np.random.Generator(np.random.PCG64([cfg.seed, group, i]))
            _, observed, mask = render_sample(cfg, rng, anomalous=(label == "anomalous"))
            stem = f"{split}_{label}_{i:04d}"
            rel = f"images/{stem}.png"
            save_grayscale(out_dir / rel, observed)
            mrel = None
            if label == "anomalous":
                mrel = f"masks/{stem}.png"
                save_mask(out_dir / mrel, mask)
            records.append(ImageRecord(rel, split, label, mrel))
    manifest = DatasetManifest(records, out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
