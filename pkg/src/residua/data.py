"""Image and mask I/O, patch tiling, and dataset manifests.

All images and masks written by this package are 8-bit grayscale PNG.
Reading also accepts lossy and RGB inputs (reduced with Pillow's ``L``
conversion).

Manifest file (UTF-8, tab separated, paths relative to the manifest's
directory)::

    #residua-manifest v1
    images/train_0000.png	train	normal	-
    images/test_0003.png	test	anomalous	masks/test_0003.png

Supported source layouts for :func:`build_manifest`:

``flat``
    ``root/normal/*`` and ``root/anomalous/*``; the mask for
    ``anomalous/<name>`` is ``root/masks/<stem>.png`` (any extension accepted).
``dagm_like``
    DAGM class folders: images in ``root/Train`` and/or ``root/Test``; an
    image ``NNNN.PNG`` is anomalous iff ``<dir>/Label/NNNN_label.PNG`` exists.
``rsdds_like``
    Whole rail images in ``root/Rail surface images`` (or ``root/images``)
    with same-named masks in ``root/GroundTruth`` (or ``root/masks``). Images
    are cut into 200x160 patches written under ``patch_dir`` and each patch
    is labeled from its mask.
"""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArgumentError, DataError, FormatError, ShapeError

log = logging.getLogger(__name__)

MANIFEST_HEADER = "#residua-manifest v1"
SPLITS = ("train", "val", "test")
LABELS = ("normal", "anomalous")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
PATCH_H, PATCH_W = 200, 160


def load_grayscale(path) -> np.ndarray:
    """Read an image as float32 intensities in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_grayscale(path, img: np.ndarray) -> None:
    """Write a [0, 1] image (or a uint8 array as is) as 8-bit PNG."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"expected a 2-D mask, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask values must be 0 or 1")
    save_grayscale(path, (mask.astype(np.uint8) * 255))


def load_mask(path, strict: bool = True) -> np.ndarray:
    """Read a {0, 255} mask as uint8 {0, 1}.

    With ``strict=False`` (third-party, possibly lossy masks) values above 127
    count as defect instead of raising on intermediate grays.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("L") if im.mode != "L" else im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    if strict:
        bad = (arr != 0) & (arr != 255)
        if bad.any():
            raise FormatError(f"{path}: mask must be binary {{0, 255}}, found value {int(arr[bad][0])}")
        return (arr == 255).astype(np.uint8)
    return (arr > 127).astype(np.uint8)


@dataclass
class Patch:
    image: np.ndarray
    mask: np.ndarray | None
    label: str
    row: int
    col: int


def tile_starts(size: int, patch: int) -> list[int]:
    """Top-left offsets of a non-overlapping tiling plus one end-anchored tile."""
    if size < patch:
        raise ShapeError(f"image dimension {size} is smaller than patch dimension {patch}")
    starts = list(range(0, size - patch + 1, patch))
    if starts[-1] + patch < size:
        starts.append(size - patch)
    return starts


def extract_patches(image: np.ndarray, mask: np.ndarray | None = None,
                    patch_h: int = PATCH_H, patch_w: int = PATCH_W) -> list[Patch]:
    """Cut ``image`` into patch_h x patch_w tiles, row-major from the top left.

    A patch is anomalous iff its slice of ``mask`` has at least one defect pixel.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {image.shape}")
    if mask is not None and np.shape(mask) != image.shape:
        raise ShapeError(f"mask shape {np.shape(mask)} != image shape {image.shape}")
    h, w = image.shape
    if h < patch_h or w < patch_w:
        raise ShapeError(f"image {h}x{w} is smaller than patch {patch_h}x{patch_w}")
    out = []
    for r in tile_starts(h, patch_h):
        for c in tile_starts(w, patch_w):
            pm = None if mask is None else np.asarray(mask)[r:r + patch_h, c:c + patch_w].copy()
            label = "anomalous" if pm is not None and pm.any() else "normal"
            out.append(Patch(image[r:r + patch_h, c:c + patch_w].copy(), pm, label, r, c))
    return out


@dataclass(frozen=True)
class ImageRecord:
    path: str
    split: str
    label: str
    mask_path: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"{self.path}: unknown split {self.split!r}")
        if self.label not in LABELS:
            raise DataError(f"{self.path}: unknown label {self.label!r}")
        if self.split == "train" and self.label != "normal":
            raise DataError(f"{self.path}: training records must be normal")
        if self.split == "test" and self.label == "anomalous" and not self.mask_path:
            raise DataError(f"{self.path}: anomalous test records need a mask")


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for rec in self.records:
            if rec.path in seen:
                raise DataError(f"duplicate manifest path {rec.path}")
            seen.add(rec.path)

    def select(self, split=None, label=None) -> list[ImageRecord]:
        return [r for r in self.records
                if (split is None or r.split == split) and (label is None or r.label == label)]

    def counts(self) -> dict[str, int]:
        out = {}
        for r in self.records:
            key = f"{r.split}/{r.label}"
            out[key] = out.get(key, 0) + 1
        return out

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_image(self, rec: ImageRecord) -> np.ndarray:
        return load_grayscale(self.resolve(rec.path))

    def load_truth(self, rec: ImageRecord, shape=None) -> np.ndarray:
        """Ground-truth mask for a record; records without one are all background."""
        if rec.mask_path:
            return load_mask(self.resolve(rec.mask_path))
        if shape is None:
            shape = self.load_image(rec).shape
        return np.zeros(shape, dtype=np.uint8)

    def check_files(self) -> None:
        for rec in self.records:
            for rel in (rec.path, rec.mask_path):
                if rel and not self.resolve(rel).is_file():
                    raise DataError(f"manifest references a missing file: {rel}")

    def to_text(self) -> str:
        lines = [MANIFEST_HEADER]
        for r in self.records:
            lines.append("\t".join((r.path, r.split, r.label, r.mask_path or "-")))
        return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.to_text(), encoding="utf-8")
    return path


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing header {MANIFEST_HEADER!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        rel, split, label, mask = parts
        records.append(ImageRecord(rel, split, label, None if mask == "-" else mask))
    manifest = DatasetManifest(records, path.parent)
    if check_files:
        manifest.check_files()
    return manifest


class ManifestSource:
    """Training image source over one split of a manifest."""

    def __init__(self, manifest: DatasetManifest, split: str = "train"):
        self.manifest = manifest
        self._records = {r.path: r for r in manifest.select(split=split)}

    def records(self):
        return [(r.path, r.label) for r in self._records.values()]

    def load(self, ident):
        return self.manifest.load_image(self._records[ident])


def split_records(normals, anomalous, split_fracs=(0.8, 0.1, 0.1), seed: int = 0) -> list[ImageRecord]:
    """Shuffle normals into train/val/test-normal; all anomalous items go to test.

    ``normals`` are relative paths; ``anomalous`` are ``(path, mask_path)``
    pairs. Records come back grouped by split and sorted by path.
    """
    fracs = tuple(float(f) for f in split_fracs)
    if len(fracs) != 3 or any(f < 0 for f in fracs) or sum(fracs) > 1.0 + 1e-9:
        raise ArgumentError(f"split fractions must be three non-negative values summing to <= 1, got {fracs}")
    normals = sorted(normals)
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(normals))
    n_train = int(round(fracs[0] * len(normals)))
    n_val = min(int(round(fracs[1] * len(normals))), len(normals) - n_train)
    if sum(fracs) < 1.0 - 1e-9:
        n_test = int(round(fracs[2] * len(normals)))
    else:
        n_test = len(normals) - n_train - n_val
    shuffled = [normals[i] for i in order]
    groups = {
        "train": shuffled[:n_train],
        "val": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:n_train + n_val + n_test],
    }
    records = []
    for split in SPLITS:
        records += [ImageRecord(p, split, "normal") for p in sorted(groups[split])]
    records += [ImageRecord(p, "test", "anomalous", m) for p, m in sorted(anomalous)]
    if not anomalous:
        warnings.warn("dataset has no anomalous images; the test split holds normals only", stacklevel=2)
    return sorted(records, key=lambda r: (SPLITS.index(r.split), r.label, r.path))


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _find_by_stem(directory: Path, stem: str) -> Path | None:
    for p in _images_in(directory):
        if p.stem == stem:
            return p
    return None


def _scan_flat(root: Path):
    normals = [p.relative_to(root).as_posix() for p in _images_in(root / "normal")]
    anomalous = []
    for p in _images_in(root / "anomalous"):
        mask = _find_by_stem(root / "masks", p.stem)
        if mask is None:
            raise DataError(f"anomalous image {p} has no mask in {root / 'masks'}")
        anomalous.append((p.relative_to(root).as_posix(), mask.relative_to(root).as_posix()))
    return normals, anomalous


def _scan_dagm(root: Path):
    normals, anomalous = [], []
    for sub in ("Train", "Test"):
        d = root / sub
        for p in _images_in(d):
            label = None
            for cand in _images_in(d / "Label"):
                if cand.stem.lower() == f"{p.stem}_label".lower():
                    label = cand
                    break
            rel = p.relative_to(root).as_posix()
            if label is None:
                normals.append(rel)
            else:
                anomalous.append((rel, label.relative_to(root).as_posix()))
    return normals, anomalous


def _rsdds_dirs(root: Path):
    for img_dir, mask_dir in (("Rail surface images", "GroundTruth"), ("images", "masks")):
        if (root / img_dir).is_dir():
            return root / img_dir, root / mask_dir
    raise DataError(f"{root}: no 'Rail surface images' or 'images' directory")


def _scan_rsdds(root: Path, patch_dir: Path):
    img_dir, mask_dir = _rsdds_dirs(root)
    normals, anomalous = [], []
    for p in _images_in(img_dir):
        mask_file = _find_by_stem(mask_dir, p.stem)
        if mask_file is None:
            raise DataError(f"rail image {p} has no ground-truth mask in {mask_dir}")
        image = load_grayscale(p)
        mask = load_mask(mask_file, strict=False)
        for patch in extract_patches(image, mask):
            stem = f"{p.stem}_r{patch.row:04d}_c{patch.col:04d}"
            rel = f"patches/{stem}.png"
            save_grayscale(patch_dir / rel, patch.image)
            if patch.label == "anomalous":
                mrel = f"patch_masks/{stem}.png"
                save_mask(patch_dir / mrel, patch.mask)
                anomalous.append((rel, mrel))
            else:
                normals.append(rel)
    return normals, anomalous


def build_manifest(root, layout: str = "flat", split_fracs=(0.8, 0.1, 0.1), seed: int = 0,
                   patch_dir=None) -> DatasetManifest:
    """Scan a dataset directory and produce a deterministic split manifest.

    For ``rsdds_like`` the manifest root is ``patch_dir`` (default
    ``root/patches200x160``), where the extracted patches are written.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    if layout == "flat":
        normals, anomalous = _scan_flat(root)
        base = root
    elif layout == "dagm_like":
        normals, anomalous = _scan_dagm(root)
        base = root
    elif layout == "rsdds_like":
        base = Path(patch_dir) if patch_dir is not None else root / "patches200x160"
        normals, anomalous = _scan_rsdds(root, base)
    else:
        raise DataError(f"unknown layout {layout!r}; expected flat, dagm_like or rsdds_like")
    if not normals and not anomalous:
        raise DataError(f"no images found under {root} for layout {layout}")
    records = split_records(normals, anomalous, split_fracs, seed)
    manifest = DatasetManifest(records, base)
    log.info("manifest: %s", manifest.counts())
    return manifest


def relative_to_manifest(manifest: DatasetManifest, path) -> str:
    return Path(os.path.relpath(Path(path), manifest.root)).as_posix()
