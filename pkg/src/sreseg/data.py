"""Dataset ingestion, patch sampling, augmentation, and synthetic phantoms.

Samples carry an RGB image in [0, 1], a binary vessel label, and an
optional field-of-view mask. Two directory layouts are understood:

* flat:  root/images/, root/labels/, optional root/fov/, with an optional
  manifest.json naming the train/test split;
* drive: root/training/ and root/test/, each holding images/, 1st_manual/
  and mask/ (files converted to PNG/PNM beforehand).

Random 90-degree rotations and flips are pure index permutations, so
augmentation is lossless; arbitrary-angle rotation uses nearest-neighbor
resampling only, which keeps labels binary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import imageio
from .ops import d4_apply

__all__ = [
    "DatasetError",
    "Sample",
    "RotatedEntry",
    "RotatedTestSet",
    "load_dataset",
    "write_dataset",
    "sample_patch",
    "random_d4_element",
    "augment_d4",
    "rotate_arbitrary",
    "make_rotated_testset",
    "gen_synthetic_vessels",
]

_IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


class DatasetError(Exception):
    """Raised for unreadable, inconsistent, or invalid dataset files."""


@dataclass
class Sample:
    """One image/label pair. image: [3, H, W] float32 in [0, 1];
    label: [H, W] uint8 in {0, 1}; fov: optional [H, W] uint8 mask."""

    image: np.ndarray
    label: np.ndarray
    id: str
    fov: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.label = np.asarray(self.label)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"sample {self.id}: image must be [3, H, W], "
                               f"got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise DatasetError(
                f"sample {self.id}: label shape {self.label.shape} does not match "
                f"image {self.image.shape[1:]}"
            )
        vals = np.unique(self.label)
        if not np.isin(vals, (0, 1)).all():
            raise DatasetError(
                f"sample {self.id}: label must be binary, found values {vals[:6]}"
            )
        self.label = self.label.astype(np.uint8)
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DatasetError(f"sample {self.id}: image values outside [0, 1]")
        if self.fov is not None:
            self.fov = np.asarray(self.fov)
            if self.fov.shape != self.label.shape:
                raise DatasetError(
                    f"sample {self.id}: fov shape {self.fov.shape} does not match "
                    f"label {self.label.shape}"
                )
            fvals = np.unique(self.fov)
            if not np.isin(fvals, (0, 1)).all():
                raise DatasetError(f"sample {self.id}: fov must be binary")
            self.fov = self.fov.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


# ---------------------------------------------------------------------------
# loading


def _binarize_label(arr: np.ndarray, path: Path) -> np.ndarray:
    vals = np.unique(arr)
    if np.isin(vals, (0, 1)).all():
        return arr.astype(np.uint8)
    if np.isin(vals, (0, 255)).all():
        return (arr > 0).astype(np.uint8)
    raise DatasetError(f"{path}: label is not binary (values {vals[:6]})")


def _load_image_file(path: Path) -> np.ndarray:
    try:
        arr = imageio.read_image(path)
    except (OSError, ValueError) as e:
        raise DatasetError(f"{path}: cannot read image: {e}") from e
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def _load_mask_file(path: Path) -> np.ndarray:
    try:
        arr = imageio.read_image(path)
    except (OSError, ValueError) as e:
        raise DatasetError(f"{path}: cannot read mask: {e}") from e
    if arr.ndim != 2:
        raise DatasetError(f"{path}: mask must be single-channel, got {arr.shape}")
    return _binarize_label(arr, path)


def _find_file(directory: Path, stem: str) -> Path | None:
    for suffix in _IMAGE_SUFFIXES:
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def _load_pair(image_path: Path, label_path: Path, fov_path: Path | None,
               sample_id: str) -> Sample:
    image = _load_image_file(image_path)
    label = _load_mask_file(label_path)
    if label.shape != image.shape[1:]:
        raise DatasetError(
            f"{label_path}: label dims {label.shape} do not match image "
            f"{image.shape[1:]} from {image_path}"
        )
    fov = _load_mask_file(fov_path) if fov_path is not None else None
    return Sample(image=image, label=label, id=sample_id, fov=fov)


def _load_flat(root: Path, split: str | None) -> list[Sample]:
    images_dir = root / "images"
    labels_dir = root / "labels"
    fov_dir = root / "fov"
    if not images_dir.is_dir():
        raise DatasetError(f"{images_dir}: missing images directory")
    ids = sorted(
        p.stem for p in images_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
    )
    if split is not None:
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise DatasetError(f"{manifest_path}: split requested but no manifest")
        manifest = json.loads(manifest_path.read_text())
        if split not in manifest:
            raise DatasetError(f"{manifest_path}: no split {split!r}")
        wanted = set(manifest[split])
        missing = wanted - set(ids)
        if missing:
            raise DatasetError(f"{manifest_path}: split names absent images "
                               f"{sorted(missing)[:4]}")
        ids = [i for i in ids if i in wanted]
    samples = []
    for sid in ids:
        image_path = _find_file(images_dir, sid)
        label_path = _find_file(labels_dir, sid)
        if label_path is None:
            raise DatasetError(f"{labels_dir}: missing label for image {sid!r}")
        fov_path = _find_file(fov_dir, sid) if fov_dir.is_dir() else None
        samples.append(_load_pair(image_path, label_path, fov_path, sid))
    return samples


def _drive_id(stem: str) -> str:
    return stem.split("_")[0]


def _load_drive(root: Path, split: str | None) -> list[Sample]:
    split_dirs = {"train": "training", "test": "test"}
    wanted = [split] if split is not None else ["train", "test"]
    samples = []
    for key in wanted:
        base = root / split_dirs[key]
        images_dir = base / "images"
        labels_dir = base / "1st_manual"
        fov_dir = base / "mask"
        if not images_dir.is_dir():
            raise DatasetError(f"{images_dir}: missing DRIVE images directory")
        image_paths = sorted(
            p for p in images_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
        )
        for image_path in image_paths:
            sid = _drive_id(image_path.stem)
            label_path = next(
                (p for p in sorted(labels_dir.iterdir())
                 if p.suffix.lower() in _IMAGE_SUFFIXES and _drive_id(p.stem) == sid),
                None,
            ) if labels_dir.is_dir() else None
            if label_path is None:
                raise DatasetError(f"{labels_dir}: missing manual label for id {sid!r}")
            fov_path = next(
                (p for p in sorted(fov_dir.iterdir())
                 if p.suffix.lower() in _IMAGE_SUFFIXES and _drive_id(p.stem) == sid),
                None,
            ) if fov_dir.is_dir() else None
            samples.append(_load_pair(image_path, label_path, fov_path, sid))
    samples.sort(key=lambda s: s.id)
    return samples


def load_dataset(root: str | Path, layout: str = "flat",
                 split: str | None = None) -> list[Sample]:
    """Load a dataset directory; ordering is deterministic by sample id.

    layout: "flat" or "drive"; split: "train", "test", or None for all.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset root does not exist")
    if split not in (None, "train", "test"):
        raise ValueError(f"split must be 'train', 'test', or None, got {split!r}")
    if layout == "flat":
        return _load_flat(root, split)
    if layout == "drive":
        return _load_drive(root, split)
    raise ValueError(f"unknown layout {layout!r} (expected 'flat' or 'drive')")


def write_dataset(samples: list[Sample], root: str | Path,
                  split: dict[str, list[str]] | None = None) -> None:
    """Write samples in the flat layout (PNG files plus manifest.json)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    have_fov = any(s.fov is not None for s in samples)
    if have_fov:
        (root / "fov").mkdir(exist_ok=True)
    for s in samples:
        imageio.write_png(root / "images" / f"{s.id}.png", s.image.transpose(1, 2, 0))
        imageio.write_png(root / "labels" / f"{s.id}.png", s.label * np.uint8(255))
        if s.fov is not None:
            imageio.write_png(root / "fov" / f"{s.id}.png", s.fov * np.uint8(255))
    manifest = {"layout": "flat", "ids": [s.id for s in samples]}
    if split:
        manifest.update({k: list(v) for k, v in split.items()})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# patching and augmentation


def sample_patch(sample: Sample, patch_size: int, rng: np.random.Generator) -> Sample:
    """Uniform random square crop fully inside the image; seeded-rng deterministic."""
    h, w = sample.height, sample.width
    if patch_size > h or patch_size > w:
        raise ValueError(
            f"patch size {patch_size} exceeds image dims {h}x{w} (sample {sample.id})"
        )
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    sl = (slice(top, top + patch_size), slice(left, left + patch_size))
    return Sample(
        image=sample.image[:, sl[0], sl[1]].copy(),
        label=sample.label[sl].copy(),
        id=sample.id,
        fov=None if sample.fov is None else sample.fov[sl].copy(),
    )


def random_d4_element(rng: np.random.Generator) -> int:
    """Uniform draw from the 8 square symmetries."""
    return int(rng.integers(8))


def augment_d4(sample: Sample, rng: np.random.Generator,
               element: int | None = None) -> Sample:
    """Apply one (random) D4 element jointly to image, label, and fov."""
    g = random_d4_element(rng) if element is None else int(element)
    return Sample(
        image=d4_apply(sample.image, g),
        label=d4_apply(sample.label, g),
        id=sample.id,
        fov=None if sample.fov is None else d4_apply(sample.fov, g),
    )


# ---------------------------------------------------------------------------
# arbitrary-angle rotation (nearest neighbor)


def rotate_arbitrary(arr: np.ndarray, degrees: float,
                     method: str = "nearest", fill: float = 0.0) -> np.ndarray:
    """Rotate the last two axes about the exact image center.

    Nearest-neighbor resampling only (labels must stay binary); source
    positions falling outside the frame take the fill value. A +90 degree
    rotation of a square array equals the lossless quarter-turn exactly.
    """
    if method != "nearest":
        raise ValueError(f"only nearest-neighbor resampling is supported, got {method!r}")
    arr = np.asarray(arr)
    if arr.ndim < 2:
        raise ValueError(f"array must have at least 2 dims, got shape {arr.shape}")
    h, w = arr.shape[-2:]
    if degrees % 360 == 0:
        return arr.copy()
    rad = math.radians(degrees)
    cos, sin = math.cos(rad), math.sin(rad)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = rows - cy, cols - cx
    src_r = np.rint(cos * dy + sin * dx + cy).astype(np.int64)
    src_c = np.rint(-sin * dy + cos * dx + cx).astype(np.int64)
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    src_r = np.clip(src_r, 0, h - 1)
    src_c = np.clip(src_c, 0, w - 1)
    out = arr[..., src_r, src_c]
    fill_value = np.asarray(fill, dtype=arr.dtype)
    out = np.where(inside, out, fill_value)
    return out.astype(arr.dtype, copy=False)


@dataclass(frozen=True)
class RotatedEntry:
    """One evaluation image: a sample rotated by `angle` degrees."""

    sample: Sample
    angle: float
    method: str = "nearest"


@dataclass
class RotatedTestSet:
    """Base samples plus rotated copies at every nonzero angle."""

    base: list[Sample]
    angles: tuple[float, ...]
    entries: list[RotatedEntry]
    method: str = "nearest"

    def base_by_id(self, sample_id: str) -> Sample:
        for s in self.base:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


def make_rotated_testset(samples: list[Sample],
                         max_degrees: int = 5) -> RotatedTestSet:
    """Rotated copies at 1-degree increments in [-max_degrees, +max_degrees].

    The 0-degree entry is the untouched original; labels (and fov) rotate
    with the image using the same nearest-neighbor transform.
    """
    angles = tuple(float(a) for a in range(-max_degrees, max_degrees + 1) if a != 0)
    entries: list[RotatedEntry] = []
    for s in samples:
        entries.append(RotatedEntry(sample=s, angle=0.0))
        for angle in angles:
            rotated = Sample(
                image=rotate_arbitrary(s.image, angle),
                label=rotate_arbitrary(s.label, angle),
                id=s.id,
                fov=None if s.fov is None else rotate_arbitrary(s.fov, angle),
            )
            entries.append(RotatedEntry(sample=rotated, angle=angle))
    return RotatedTestSet(base=list(samples), angles=angles, entries=entries)


# ---------------------------------------------------------------------------
# synthetic vessel phantoms


def _disk_offsets(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    ys, xs = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    keep = ys * ys + xs * xs <= radius * radius + 1e-9
    return np.stack([ys[keep], xs[keep]], axis=1)


def _stamp_walk(label: np.ndarray, rng: np.random.Generator, size: int) -> None:
    width = int(rng.integers(1, 4))
    offsets = _disk_offsets(width / 2.0)
    y = float(rng.uniform(0.2, 0.8) * size)
    x = float(rng.uniform(0.2, 0.8) * size)
    # uniform initial heading: the walk ensemble has no preferred orientation
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    steps = int(size * rng.uniform(1.0, 1.4))
    for _ in range(steps):
        iy, ix = int(round(y)), int(round(x))
        pts_y = offsets[:, 0] + iy
        pts_x = offsets[:, 1] + ix
        keep = (pts_y >= 0) & (pts_y < size) & (pts_x >= 0) & (pts_x < size)
        label[pts_y[keep], pts_x[keep]] = 1
        heading += float(rng.normal(0.0, 0.08))
        y += math.sin(heading)
        x += math.cos(heading)
        if not (-size * 0.2 < y < size * 1.2 and -size * 0.2 < x < size * 1.2):
            break


def _box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return (acc / 9.0).astype(img.dtype)


def _gen_one(rng: np.random.Generator, size: int, sid: str) -> Sample:
    for _ in range(20):
        label = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(2, 4))):
            _stamp_walk(label, rng, size)
        density = label.mean()
        if 0.02 <= density <= 0.20:
            break
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size),
                         indexing="ij")
    g = rng.uniform(-1.0, 1.0, size=3)
    background = 0.22 + 0.08 * (g[0] * yy + g[1] * xx) + 0.05 * g[2] * (xx * xx + yy * yy)
    gray = np.clip(background, 0.05, 0.45)
    vessel_level = float(rng.uniform(0.75, 0.9))
    gray = np.where(label > 0, vessel_level, gray).astype(np.float32)
    gray = _box_blur3(gray)
    weights = np.clip(np.array([1.0, 0.8, 0.6]) + rng.normal(0.0, 0.04, size=3), 0.3, 1.0)
    image = gray[None] * weights[:, None, None]
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, label=label, id=sid)


def gen_synthetic_vessels(seed: int, count: int, size: int = 96) -> list[Sample]:
    """Procedural vessel phantoms: curvilinear bright tubes (width 1-4 px)
    on a smooth dark background, mild noise, no preferred orientation.

    Deterministic for a fixed seed; per-image streams are split from the
    seed so the set is stable regardless of generation order.
    """
    if count < 1 or size < 8:
        raise ValueError("count must be >= 1 and size >= 8")
    seqs = np.random.SeedSequence(seed).spawn(count)
    width = max(2, len(str(count - 1)))
    return [
        _gen_one(np.random.Generator(np.random.Philox(seq)), size,
                 "synth{:0{}d}".format(i, width))
        for i, seq in enumerate(seqs)
    ]
