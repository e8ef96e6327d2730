"""Deterministic synthetic image-classification data.

Ten shape classes rendered at 3x16x16 with random position, size, colours and
pixel noise.  Splits are stratified, so every split is exactly class-balanced.

On disk a dataset directory holds ``{split}_x.npy`` (uint8, N x 3 x 16 x 16),
``{split}_y.npy`` (uint8 labels) for ``split`` in train/val/test, plus
``dataset.json`` with the generator settings and a content hash.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import make_rng

CLASSES = (
    "disk",
    "square",
    "ring",
    "frame",
    "plus",
    "cross",
    "triangle_up",
    "triangle_down",
    "hbar",
    "vbar",
)
IMAGE_SHAPE = (3, 16, 16)
DEFAULT_SIZES = {"train": 8000, "val": 1000, "test": 1000}
SPLITS = ("train", "val", "test")
# per-channel normalisation applied when images are fed to a model
MEAN = 0.5
STD = 0.25


@dataclass
class Split:
    images: np.ndarray  # uint8 N x C x H x W
    labels: np.ndarray  # uint8 N

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def x(self) -> np.ndarray:
        return to_float(self.images)

    @property
    def y(self) -> np.ndarray:
        return self.labels.astype(np.int64)

    def head(self, n: int) -> Split:
        return Split(self.images[:n], self.labels[:n])


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    seed: int = 0

    def split(self, name: str) -> Split:
        return getattr(self, name)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in SPLITS:
            s = self.split(name)
            h.update(s.images.tobytes())
            h.update(s.labels.tobytes())
        return h.hexdigest()


def to_float(images: np.ndarray) -> np.ndarray:
    return ((images.astype(np.float32) / 255.0) - MEAN) / STD


def _masks(labels: np.ndarray, cx, cy, r) -> np.ndarray:
    h, w = IMAGE_SHAPE[1:]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx[None] + 0.5 - cx[:, None, None]
    dy = yy[None] + 0.5 - cy[:, None, None]
    r = r[:, None, None]
    d = np.hypot(dx, dy)
    cheb = np.maximum(np.abs(dx), np.abs(dy))
    thick = np.maximum(r / 3.0, 1.0)
    top = dy + r  # distance below the top edge of the bounding box
    shapes = [
        d <= r,
        cheb <= 0.85 * r,
        (d <= r) & (d >= 0.55 * r),
        (cheb <= 0.9 * r) & (cheb >= 0.5 * r),
        ((np.abs(dx) <= thick / 2) & (np.abs(dy) <= r)) | ((np.abs(dy) <= thick / 2) & (np.abs(dx) <= r)),
        ((np.abs(dx - dy) <= thick / 1.4) | (np.abs(dx + dy) <= thick / 1.4)) & (cheb <= r),
        (top >= 0) & (dy <= r) & (np.abs(dx) <= top / 2),
        (dy <= r) & (top >= 0) & (np.abs(dx) <= (r - dy) / 2),
        (np.abs(dy) <= thick / 2) & (np.abs(dx) <= r),
        (np.abs(dx) <= thick / 2) & (np.abs(dy) <= r),
    ]
    out = np.zeros(d.shape, dtype=bool)
    for k, m in enumerate(shapes):
        sel = labels == k
        out[sel] = m[sel]
    return out


def render(labels: np.ndarray, rng: np.random.Generator, noise: float = 0.08) -> np.ndarray:
    """Render one uint8 image per label."""
    n = len(labels)
    h, w = IMAGE_SHAPE[1:]
    r = rng.uniform(3.5, 6.5, n)
    cx = rng.uniform(r * 0.8, w - r * 0.8)
    cy = rng.uniform(r * 0.8, h - r * 0.8)
    bg = rng.uniform(0.0, 1.0, (n, 3))
    fg = rng.uniform(0.0, 1.0, (n, 3))
    # push the foreground away from the background so every shape is visible
    lum = lambda c: c @ np.array([0.3, 0.5, 0.2])  # noqa: E731
    gap = lum(fg) - lum(bg)
    weak = np.abs(gap) < 0.3
    shift = np.where(gap >= 0, 0.3, -0.3)[:, None]
    fg[weak] = np.clip(bg[weak] + shift[weak] + rng.uniform(-0.1, 0.1, (weak.sum(), 3)), 0, 1)
    mask = _masks(labels, cx, cy, r)[:, None]
    img = np.where(mask, fg[:, :, None, None], bg[:, :, None, None])
    img = img + rng.normal(0.0, noise, (n, 3, h, w))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate(seed: int = 0, sizes: dict[str, int] | None = None, num_classes: int = 10) -> Dataset:
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    if not 2 <= num_classes <= len(CLASSES):
        raise ValueError(f"num_classes must be in [2, {len(CLASSES)}]")
    streams = np.random.SeedSequence(seed).spawn(len(SPLITS))
    splits = {}
    for name, ss in zip(SPLITS, streams):
        n = sizes[name]
        if n % num_classes:
            raise ValueError(f"{name} size {n} is not a multiple of {num_classes}")
        rng = make_rng(ss)
        labels = np.repeat(np.arange(num_classes, dtype=np.uint8), n // num_classes)
        labels = labels[rng.permutation(n)]
        splits[name] = Split(render(labels, rng), labels)
    return Dataset(seed=seed, **splits)


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        s = ds.split(name)
        np.save(d / f"{name}_x.npy", s.images)
        np.save(d / f"{name}_y.npy", s.labels)
    meta = {
        "format": "rlcompress-dataset",
        "version": 1,
        "seed": ds.seed,
        "image_shape": list(IMAGE_SHAPE),
        "classes": list(CLASSES[: int(ds.train.labels.max()) + 1]),
        "sizes": {name: len(ds.split(name)) for name in SPLITS},
        "hash": ds.content_hash(),
    }
    (d / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    meta = json.loads((d / "dataset.json").read_text())
    splits = {
        name: Split(np.load(d / f"{name}_x.npy"), np.load(d / f"{name}_y.npy")) for name in SPLITS
    }
    return Dataset(seed=int(meta.get("seed", 0)), **splits)
