"""Datasets: parametric colored shapes and class-named image directories.

Images are float32 tensors in [-1, 1], shape (N, 3, H, W). The affine map
from 8-bit pixels is ``x = p / 127.5 - 1``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from ..rng import numpy_rng

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond")
COLORS = {
    "red": (0.90, 0.20, 0.20),
    "green": (0.20, 0.80, 0.30),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.90, 0.85, 0.20),
    "magenta": (0.85, 0.25, 0.85),
    "cyan": (0.20, 0.85, 0.85),
}
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass
class DatasetDescriptor:
    source: str  # synthetic | image-directory | packed-binary
    image_size: int
    num_classes: int
    splits: Dict[str, List[int]]
    class_names: List[str]
    normalization: str = "[-1, 1]: x = p / 127.5 - 1"
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    descriptor: DatasetDescriptor
    images: torch.Tensor
    labels: torch.Tensor
    paths: Optional[List[str]] = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def flip(self) -> bool:
        return bool(self.descriptor.params.get("flip", False))

    def split(self, name: str) -> "Dataset":
        idx = self.descriptor.splits[name]
        sel = torch.as_tensor(idx, dtype=torch.long)
        paths = [self.paths[i] for i in idx] if self.paths else None
        desc = DatasetDescriptor(**{**self.descriptor.to_dict(), "splits": {name: list(range(len(idx)))}})
        return Dataset(desc, self.images[sel], self.labels[sel], paths)

    def subset(self, indices) -> "Dataset":
        idx = [int(i) for i in indices]
        sel = torch.as_tensor(idx, dtype=torch.long)
        desc = DatasetDescriptor(**{**self.descriptor.to_dict(), "splits": {"all": list(range(len(idx)))}})
        return Dataset(desc, self.images[sel], self.labels[sel], [self.paths[i] for i in idx] if self.paths else None)


def random_flip(images: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Flip each image horizontally with probability 1/2."""
    mask = torch.rand(images.shape[0], generator=gen) < 0.5
    return torch.where(mask[:, None, None, None], images.flip(-1), images)


def to_unit_range(pixels_uint8: np.ndarray) -> np.ndarray:
    return pixels_uint8.astype(np.float32) / 127.5 - 1.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _mask(shape: str, xx, yy, cx, cy, r):
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        s = 0.8 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "triangle":
        # upright isosceles: apex at cy - r, base at cy + 0.7 r
        top, bottom = cy - r, cy + 0.7 * r
        frac = (yy - top) / (bottom - top)
        return (yy >= top) & (yy <= bottom) & (np.abs(dx) <= frac * r)
    if shape == "cross":
        w = r / 3.0
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape {shape!r}")


def class_grid(num_classes: int, num_shapes: int) -> List[Tuple[str, str]]:
    """Class c is (shape c % num_shapes, color c // num_shapes)."""
    if not 1 <= num_shapes <= len(SHAPES):
        raise ValueError(f"num_shapes must be in 1..{len(SHAPES)}")
    colors = list(COLORS)
    if num_classes > num_shapes * len(colors):
        raise ValueError(f"at most {num_shapes * len(colors)} classes with {num_shapes} shapes")
    return [(SHAPES[c % num_shapes], colors[c // num_shapes]) for c in range(num_classes)]


def synthesize_dataset(
    classes: int = 4,
    per_class: int = 64,
    size: int = 32,
    seed: int = 0,
    *,
    num_shapes: Optional[int] = None,
    difficulty: float = 1.0,
    separable: bool = False,
    eval_fraction: float = 0.25,
) -> Dataset:
    """Colored-shape images, one class per (shape, color) pair.

    ``difficulty`` in [0, 1] scales position / size / brightness jitter,
    background variation and pixel noise. ``separable=True`` renders every
    class as one fixed, centred template with a distinct color plus mild
    noise, which a linear classifier on raw pixels separates perfectly.
    """
    if classes < 1 or per_class < 1 or size < 4:
        raise ValueError(f"invalid dataset spec classes={classes} per_class={per_class} size={size}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    if not 0.0 <= eval_fraction < 1.0:
        raise ValueError(f"eval_fraction must lie in [0, 1), got {eval_fraction}")
    num_shapes = num_shapes or min(classes, 4)
    grid = class_grid(classes, num_shapes)
    rng = numpy_rng(seed, "synthesize")
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i, c in enumerate(labels):
        shape, color = grid[c]
        rgb = np.array(COLORS[color])
        if separable:
            cx = cy = size / 2.0
            r = 0.35 * size
            bg = np.full(3, 0.5)
            bright, noise = 1.0, 0.02
        else:
            d = difficulty
            r = size * (0.30 - 0.12 * d * rng.random())
            margin = r + 1.0
            cx = size / 2 + d * (rng.random() - 0.5) * (size - 2 * margin)
            cy = size / 2 + d * (rng.random() - 0.5) * (size - 2 * margin)
            bg = np.full(3, 0.5 + 0.3 * d * (rng.random() - 0.5)) + 0.1 * d * (rng.random(3) - 0.5)
            bright = 1.0 + 0.4 * d * (rng.random() - 0.5)
            noise = 0.02 + 0.08 * d
        m = _mask(shape, xx, yy, cx, cy, r)
        img = np.where(m[None], np.clip(rgb * bright, 0, 1)[:, None, None], bg[:, None, None])
        img = img + noise * rng.standard_normal(img.shape)
        out[i] = np.clip(img, 0.0, 1.0) * 2.0 - 1.0

    splits = stratified_split(labels, eval_fraction, seed)
    desc = DatasetDescriptor(
        source="synthetic",
        image_size=size,
        num_classes=classes,
        splits=splits,
        class_names=[f"{s}-{c}" for s, c in grid],
        params={
            "classes": classes, "per_class": per_class, "size": size, "seed": seed,
            "num_shapes": num_shapes, "difficulty": difficulty, "separable": separable,
            "eval_fraction": eval_fraction,
        },
    )
    return Dataset(desc, torch.from_numpy(out), torch.from_numpy(labels.astype(np.int64)))


def stratified_split(labels: np.ndarray, eval_fraction: float, seed: int) -> Dict[str, List[int]]:
    labels = np.asarray(labels)
    rng = numpy_rng(seed, "split")
    train, ev = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(eval_fraction * len(idx)))
        if eval_fraction > 0 and len(idx) > 1:
            k = min(max(k, 1), len(idx) - 1)
        ev.extend(int(i) for i in idx[:k])
        train.extend(int(i) for i in idx[k:])
    return {"train": sorted(train), "eval": sorted(ev)}


def _load_image(path: Path, size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        scale = size / min(w, h)
        nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
        im = im.resize((nw, nh), Image.BICUBIC)
        left, top = (nw - size) // 2, (nh - size) // 2
        im = im.crop((left, top, left + size, top + size))
        arr = np.asarray(im, dtype=np.uint8)
    return to_unit_range(arr).transpose(2, 0, 1)


def load_image_directory(path, size: int, *, flip: bool = False, eval_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Read ``path/<class>/<image>`` files, resize the short side and center-crop.

    Files are visited in lexicographic path order. Undecodable files are
    logged and skipped; a class directory with no readable image is an error.
    ``flip=True`` marks the dataset for random horizontal flipping wherever
    images are consumed for training (see :func:`random_flip`).
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no class subdirectories in {root}")
    images, labels, paths, skipped = [], [], [], []
    for c, d in enumerate(class_dirs):
        count = 0
        for f in sorted(p for p in d.rglob("*") if p.is_file()):
            try:
                images.append(_load_image(f, size))
            except Exception as exc:  # PIL raises a variety of types
                log.warning("skipping unreadable file %s: %s", f, exc)
                skipped.append(str(f))
                continue
            labels.append(c)
            paths.append(str(f.relative_to(root)))
            count += 1
        if count == 0:
            raise ValueError(f"class directory {d} contains no readable images")
    x = torch.from_numpy(np.stack(images).astype(np.float32))
    y = torch.tensor(labels, dtype=torch.long)
    splits = stratified_split(y.numpy(), eval_fraction, seed)
    desc = DatasetDescriptor(
        source="image-directory",
        image_size=size,
        num_classes=len(class_dirs),
        splits=splits,
        class_names=[d.name for d in class_dirs],
        params={"path": str(root), "flip": flip, "skipped": skipped, "eval_fraction": eval_fraction, "seed": seed},
    )
    return Dataset(desc, x, y, paths)


def save_packed(dataset: Dataset, path) -> None:
    """Store images, labels and descriptor in the tensor container format."""
    from .checkpoint import save_container

    meta = {"kind": "dataset", "descriptor": dataset.descriptor.to_dict(), "paths": dataset.paths}
    save_container(path, {"images": dataset.images, "labels": dataset.labels}, meta)


def load_packed(path) -> Dataset:
    from .checkpoint import load_container

    tensors, meta = load_container(path, kind="dataset")
    desc = DatasetDescriptor(**meta["descriptor"])
    desc.source = "packed-binary"
    labels = tensors["labels"]
    if labels.numel() and not (0 <= int(labels.min()) and int(labels.max()) < desc.num_classes):
        raise ValueError(f"{path}: labels outside [0, {desc.num_classes})")
    return Dataset(desc, tensors["images"], labels, meta.get("paths"))
