"""Synthetic multi-scale shape segmentation data and manifest files.

Six classes: background plus five shapes. The thin ring is the rare,
finely structured class; it plays the part of a hard class for the
bootstrapping experiment.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .pnm import image_to_tensor, read_pgm, read_ppm, write_pgm, write_ppm

IGNORE_LABEL = 255
CLASS_NAMES = ("background", "disk", "square", "triangle", "ring", "stripe")
NUM_CLASSES = len(CLASS_NAMES)
RING = CLASS_NAMES.index("ring")

# mean RGB per class; per-object jitter and per-pixel noise are added on top
CLASS_COLORS = np.array([
    [0.45, 0.45, 0.45],
    [0.85, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.20, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.80, 0.30, 0.80],
])
OBJECT_JITTER = 0.04
PIXEL_NOISE = 0.04
# relative draw frequency of each shape class (ring is deliberately rarer)
SHAPE_WEIGHTS = {1: 1.0, 2: 1.0, 3: 1.0, 4: 0.3, 5: 1.0}
# object radius range and ring width, as fractions of the image side
RADIUS_RANGE = (1 / 6, 1 / 2)
RING_WIDTH = (0.155, 0.186)
# outer ring radius relative to the drawn object radius
RING_OUTER = 1.5


@dataclass
class Sample:
    image: np.ndarray  # (3, h, w) float64 in [0, 1]
    label: np.ndarray  # (h, w) uint8

    def __post_init__(self):
        if self.image.shape[1:] != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} differ spatially")


@dataclass(frozen=True)
class ManifestEntry:
    image: Path
    label: Path
    classes: FrozenSet[int] = frozenset()


@dataclass
class Manifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def load(self, i: int) -> Sample:
        e = self.entries[i]
        return Sample(image_to_tensor(read_ppm(e.image)), read_pgm(e.label))


def present_classes(label: np.ndarray) -> FrozenSet[int]:
    return frozenset(int(v) for v in np.unique(label) if v != IGNORE_LABEL)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _rotate(yy, xx, cy, cx, theta):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    return c * dy - s * dx, s * dy + c * dx


def _shape_mask(kind: int, size: int, rng: np.random.Generator, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    margin = radius * 0.5
    cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
    theta = rng.uniform(0, np.pi)
    if kind == 1:  # disk
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    if kind == 2:  # square, area matched to the disk
        u, v = _rotate(yy, xx, cy, cx, theta)
        half = radius * np.sqrt(np.pi) / 2
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == 3:  # equilateral triangle, area matched to the disk
        u, v = _rotate(yy, xx, cy, cx, theta)
        r = radius * 2 * np.sqrt(np.pi / (3 * np.sqrt(3)))
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = 2 * np.pi * k / 3
            inside &= (u * np.cos(a) + v * np.sin(a)) <= r / 2
        return inside
    if kind == 4:  # thin ring
        outer = radius * RING_OUTER
        thickness = rng.uniform(*RING_WIDTH) * size
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return (d <= outer) & (d > outer - thickness)
    if kind == 5:  # stripe across a large part of the image
        u, v = _rotate(yy, xx, cy, cx, theta)
        half_w = max(2.5, radius * 0.35)
        half_l = rng.uniform(2.0, 4.0) * radius
        return (np.abs(u) <= half_w) & (np.abs(v) <= half_l)
    raise ValueError(f"unknown shape class {kind}")


def generate_sample(rng: np.random.Generator, image_size: int,
                    class_menu: Sequence[int] = (1, 2, 3, 4, 5)) -> Sample:
    """One image with 1-4 shapes whose areas span a 9x range."""
    size = image_size
    label = np.zeros((size, size), dtype=np.uint8)
    bg = CLASS_COLORS[0] + rng.normal(0, OBJECT_JITTER, 3)
    color = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    menu = np.array(class_menu, dtype=np.int64)
    weights = np.array([SHAPE_WEIGHTS.get(int(c), 1.0) for c in menu])
    weights = weights / weights.sum()
    r_min, r_max = size * RADIUS_RANGE[0], size * RADIUS_RANGE[1]
    for _ in range(int(rng.integers(1, 5))):
        kind = int(rng.choice(menu, p=weights))
        radius = float(np.exp(rng.uniform(np.log(r_min), np.log(r_max))))
        mask = _shape_mask(kind, size, rng, radius)
        obj = CLASS_COLORS[kind] + rng.normal(0, OBJECT_JITTER, 3)
        label[mask] = kind
        color[:, mask] = obj[:, None]
    noisy = color + rng.normal(0, PIXEL_NOISE, color.shape)
    image = np.clip(np.rint(noisy * 255.0), 0, 255) / 255.0
    return Sample(image, label)


def generate_samples(seed: int, num_images: int, image_size: int,
                     class_menu: Sequence[int] = (1, 2, 3, 4, 5)) -> List[Sample]:
    rng = np.random.default_rng(seed)
    return [generate_sample(rng, image_size, class_menu) for _ in range(num_images)]


def write_samples(samples: Sequence[Sample], out_dir, prefix: str = "img", start: int = 0) -> List[ManifestEntry]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples, start=start):
        img_path = out / "images" / f"{prefix}{i:05d}.ppm"
        lbl_path = out / "labels" / f"{prefix}{i:05d}.pgm"
        rgb = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        write_ppm(img_path, rgb)
        write_pgm(lbl_path, s.label)
        entries.append(ManifestEntry(img_path, lbl_path, present_classes(s.label)))
    return entries


def generate_dataset(seed: int, num_images: int, image_size: int, out_dir,
                     class_menu: Sequence[int] = (1, 2, 3, 4, 5), split: str = "train") -> Manifest:
    """Generate, write to ``out_dir`` and return the manifest (not yet saved)."""
    samples = generate_samples(seed, num_images, image_size, class_menu)
    return Manifest(write_samples(samples, out_dir), split)


def split_counts(count: int) -> Tuple[int, int]:
    n_train = (count * 4) // 5
    return n_train, count - n_train


# ---------------------------------------------------------------------------
# manifest files: one "image<TAB>label" line per sample, paths relative to the file
# ---------------------------------------------------------------------------

def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for e in manifest.entries:
        img = os.path.relpath(Path(e.image).resolve(), base)
        lbl = os.path.relpath(Path(e.label).resolve(), base)
        lines.append(f"{Path(img).as_posix()}\t{Path(lbl).as_posix()}\n")
    path.write_text("".join(lines))


def read_manifest(path, split: Optional[str] = None) -> Manifest:
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image<TAB>label'")
        img, lbl = base / parts[0], base / parts[1]
        label = read_pgm(lbl)
        entries.append(ManifestEntry(img, lbl, present_classes(label)))
    return Manifest(entries, split or path.stem)


def class_histogram(samples: Iterable[Sample], num_classes: int = NUM_CLASSES):
    """(images containing each class, pixels of each class)."""
    img_counts = np.zeros(num_classes, dtype=np.int64)
    px_counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        bc = np.bincount(s.label[s.label != IGNORE_LABEL].ravel(), minlength=num_classes)[:num_classes]
        px_counts += bc
        img_counts += bc > 0
    return img_counts, px_counts
