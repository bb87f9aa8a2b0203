"""Image ingestion, resizing, dataset statistics, and a deterministic
synthetic opacity dataset for desk-scale verification.

Directory layout for real data: ``<root>/{train,val}/{NORMAL,OPACITY}/*``
holding 8-bit grayscale or RGB images.  Files are consumed in lexicographic
order per class so fold indices are stable across runs and platforms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

NORMAL, OPACITY = 0, 1
CLASS_DIRS = (("NORMAL", NORMAL), ("OPACITY", OPACITY))
TARGET_SIZE = 256


class DataError(IOError):
    """Raised when the dataset directory layout is unusable."""


@dataclass
class LabeledImage:
    """One image ready for the network: (1, s, s, 3) float32 pixels in [0, 1]."""

    pixels: np.ndarray
    label: int
    source_id: str


@dataclass
class DatasetStats:
    """Class counts per split plus raw width/height statistics (pre-resize)."""

    train_normal: int
    train_opacity: int
    val_normal: int
    val_opacity: int
    width_mean: float
    width_std: float
    height_mean: float
    height_std: float

    def summary(self) -> str:
        return "\n".join([
            f"train: normal={self.train_normal} opacity={self.train_opacity}",
            f"val:   normal={self.val_normal} opacity={self.val_opacity}",
            f"raw width:  mean={self.width_mean:.3f} std={self.width_std:.3f}",
            f"raw height: mean={self.height_mean:.3f} std={self.height_std:.3f}",
        ])


@dataclass
class Dataset:
    train_normal: list = field(default_factory=list)
    train_opacity: list = field(default_factory=list)
    val: list = field(default_factory=list)
    stats: Optional[DatasetStats] = None


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an (h, w, c) array using half-pixel centers.

    Source coordinates are clamped at the edges, so constant images stay
    constant and outputs never leave the input's value range.
    """
    h, w = img.shape[:2]
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ValueError(f"cannot resize {img.shape[:2]} to ({out_h}, {out_w})")
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_normalize(raw: np.ndarray, target: int = TARGET_SIZE) -> np.ndarray:
    """Raw 8-bit (h, w) or (h, w, 3) image -> (1, target, target, 3) in [0, 1].

    Grayscale is replicated to three channels; the resize stretches to a
    square without preserving aspect ratio.
    """
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (h, w) or (h, w, 3) input, got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("zero-sized image")
    scaled = arr.astype(np.float32) / 255.0
    out = resize_bilinear(scaled, target, target).astype(np.float32)
    return out[None, ...]


def _load_class_dir(class_dir: Path, label: int, target: int,
                    raw_sizes: list) -> list:
    images = []
    for p in sorted(class_dir.iterdir()):
        if not p.is_file():
            continue
        try:
            with Image.open(p) as im:
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                size = im.size  # (width, height)
                arr = np.asarray(im)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        raw_sizes.append(size)
        images.append(LabeledImage(pixels=resize_normalize(arr, target),
                                   label=label, source_id=str(p)))
    return images


def load_dataset(root, target: int = TARGET_SIZE) -> Dataset:
    """Load ``<root>/{train,val}/{NORMAL,OPACITY}/*`` into memory.

    Unreadable files are skipped with a warning and excluded from counts;
    missing class directories are an error.
    """
    root = Path(root)
    raw_sizes: list = []
    per_split: dict = {}
    for split in ("train", "val"):
        for class_name, label in CLASS_DIRS:
            d = root / split / class_name
            if not d.is_dir():
                raise DataError(f"missing dataset directory {d}")
            per_split[(split, label)] = _load_class_dir(d, label, target, raw_sizes)

    widths = np.array([s[0] for s in raw_sizes], dtype=np.float64)
    heights = np.array([s[1] for s in raw_sizes], dtype=np.float64)
    stats = DatasetStats(
        train_normal=len(per_split[("train", NORMAL)]),
        train_opacity=len(per_split[("train", OPACITY)]),
        val_normal=len(per_split[("val", NORMAL)]),
        val_opacity=len(per_split[("val", OPACITY)]),
        width_mean=float(widths.mean()) if widths.size else math.nan,
        width_std=float(widths.std()) if widths.size else math.nan,
        height_mean=float(heights.mean()) if heights.size else math.nan,
        height_std=float(heights.std()) if heights.size else math.nan,
    )
    val = per_split[("val", NORMAL)] + per_split[("val", OPACITY)]
    return Dataset(train_normal=per_split[("train", NORMAL)],
                   train_opacity=per_split[("train", OPACITY)],
                   val=val, stats=stats)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth low-frequency field plus brightness jitter and pixel noise.

    The per-image brightness offset is deliberately large so global
    statistics (mean intensity) stay weak class evidence.
    """
    coarse = rng.uniform(0.3, 0.7, size=(5, 5, 1))
    field_ = resize_bilinear(coarse, size, size)[..., 0]
    offset = rng.uniform(-0.18, 0.18)
    noise = rng.normal(0.0, 0.04, size=(size, size))
    return field_ + offset + noise


def _add_blobs(rng: np.random.Generator, img: np.ndarray, size: int) -> np.ndarray:
    """Stamp 1-3 blurred bright ellipses onto the image."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = img.copy()
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        a = rng.uniform(size / 9, size / 4.5)
        b = rng.uniform(size / 9, size / 4.5)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64)
        blurred = gaussian_filter(mask, sigma=size / 28)
        peak = blurred.max()
        if peak > 0:
            out = out + rng.uniform(0.22, 0.38) * blurred / peak
    return out


def synth_generate(n_per_class: int, size: int, seed: int) -> list:
    """Deterministic synthetic set: n_per_class normals and opacities.

    Normal images are smooth noisy gradients; opacity images add blurred
    bright ellipses.  The background variation is strong enough that a
    linear pixel classifier stays weak while a convolutional detector
    separates the classes comfortably.
    """
    if n_per_class < 1:
        raise ValueError("need at least one image per class")
    if size < 1:
        raise ValueError(f"invalid image size {size}")
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n_per_class):
        img = np.clip(_background(rng, size), 0.0, 1.0)
        pixels = np.repeat(img[None, :, :, None], 3, axis=3).astype(np.float32)
        images.append(LabeledImage(pixels=pixels, label=NORMAL,
                                   source_id=f"synth-normal-{i:04d}"))
    for i in range(n_per_class):
        img = np.clip(_add_blobs(rng, _background(rng, size), size), 0.0, 1.0)
        pixels = np.repeat(img[None, :, :, None], 3, axis=3).astype(np.float32)
        images.append(LabeledImage(pixels=pixels, label=OPACITY,
                                   source_id=f"synth-opacity-{i:04d}"))
    return images


def synth_dataset(n_train: int, n_val: int, size: int, seed: int) -> Dataset:
    """Convenience wrapper: separate train/val synthetic splits."""
    train = synth_generate(n_train, size, seed)
    val = synth_generate(n_val, size, seed + 1)
    return Dataset(train_normal=[im for im in train if im.label == NORMAL],
                   train_opacity=[im for im in train if im.label == OPACITY],
                   val=val, stats=None)


def write_image_dir(dataset: Dataset, root) -> None:
    """Materialize a dataset as PNG files in the standard directory layout."""
    root = Path(root)
    groups = {
        ("train", NORMAL): dataset.train_normal,
        ("train", OPACITY): dataset.train_opacity,
        ("val", NORMAL): [im for im in dataset.val if im.label == NORMAL],
        ("val", OPACITY): [im for im in dataset.val if im.label == OPACITY],
    }
    for (split, label), images in groups.items():
        class_name = dict((v, k) for k, v in CLASS_DIRS)[label]
        d = root / split / class_name
        d.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(images):
            arr = np.clip(im.pixels[0] * 255.0, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(d / f"{i:05d}.png")
