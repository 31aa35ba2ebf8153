"""Procedural toy dataset: 32x32 RGB renders of simple shapes.

Eight classes = four shapes (circle, square, triangle, cross) times two
palettes (warm, cool). Position and scale jitter are seeded per image, so
generation is deterministic in (seed, index) and independent of order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
# per-shape foreground colors are chosen with well-spread offsets from the
# background so pooled (shape-blind) feature views still separate classes
PALETTES = (
    {"bg": (0.85, 0.78, 0.66),
     "fg": {"circle": (0.10, 0.78, 0.66), "square": (0.85, 0.08, 0.66),
            "triangle": (0.85, 0.78, 0.05), "cross": (0.25, 0.18, 0.08)}},
    {"bg": (0.10, 0.16, 0.26),
     "fg": {"circle": (0.10, 0.16, 0.92), "square": (0.88, 0.16, 0.26),
            "triangle": (0.10, 0.90, 0.26), "cross": (0.58, 0.64, 0.74)}},
)
N_CLASSES = len(SHAPES) * len(PALETTES)


@dataclass
class ToyDataset:
    images: np.ndarray                 # (M, 3, H, W) float32 in [0, 1]
    labels: np.ndarray                 # (M,) int in [0, N_CLASSES)
    splits: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def of_class(self, label: int) -> np.ndarray:
        return self.images[self.labels == label]


def class_name(label: int) -> str:
    shape = SHAPES[label % len(SHAPES)]
    palette = "warm" if label < len(SHAPES) else "cool"
    return f"{shape}_{palette}"


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "cross":
        bar = r / 2.5
        return ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= bar) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def render_image(label: int, seed: int, index: int, size: int = 32) -> np.ndarray:
    """One seeded class render; deterministic in (seed, index)."""
    rng = np.random.default_rng([seed, index])
    shape = SHAPES[label % len(SHAPES)]
    palette = PALETTES[label // len(SHAPES)]

    cy = size / 2 + rng.uniform(-size / 8, size / 8)
    cx = size / 2 + rng.uniform(-size / 8, size / 8)
    r = size * rng.uniform(0.20, 0.32)
    mask = _shape_mask(shape, size, cy, cx, r)

    img = np.empty((3, size, size), dtype=np.float64)
    grad = np.linspace(-0.04, 0.04, size)[None, :, None]
    for c in range(3):
        bg = palette["bg"][c] + rng.uniform(-0.02, 0.02)
        fg = palette["fg"][shape][c] + rng.uniform(-0.02, 0.02)
        img[c] = np.where(mask, fg, bg)
    img = img + grad
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_toy_dataset(count: int, seed: int, size: int = 32) -> ToyDataset:
    """Balanced dataset cycling the eight classes; 3:1 train/eval split."""
    if count < 1:
        raise ValueError("gen_toy_dataset: count must be >= 1")
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    splits = []
    for i in range(count):
        label = i % N_CLASSES
        images[i] = render_image(label, seed, i, size)
        labels[i] = label
        splits.append("eval" if i % 4 == 3 else "train")
    return ToyDataset(images=images, labels=labels, splits=splits,
                      class_names=[class_name(c) for c in range(N_CLASSES)])
