"""Dataset handling: paired image/mask directories, the train/val split,
and a synthetic ellipse dataset for self-contained runs.

Layout on disk is ``root/images/*`` and ``root/masks/*`` paired by file
stem. Masks are 8-bit grayscale, binarized at >127 on load.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import make_rng


@dataclass
class SegSample:
    """One image/mask pair, image [3, H, W] float32 in [0,1], mask [H, W]
    float32 in {0, 1}."""

    name: str
    image: np.ndarray
    mask: np.ndarray


@dataclass
class SplitSpec:
    ratio: float = 0.2
    seed: int = 41

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"split ratio must be in (0, 1), got {self.ratio}")


def _stems(directory):
    out = {}
    for entry in sorted(os.listdir(directory)):
        path = os.path.join(directory, entry)
        if os.path.isfile(path):
            out[os.path.splitext(entry)[0]] = path
    return out


def load_dataset(root, target_size=None):
    """Load every image/mask pair under ``root``, sorted by stem.

    Images resize bilinearly to target_size x target_size, masks by nearest
    neighbor (then binarize), so resized masks stay hard.
    """
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    for d in (img_dir, mask_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"missing dataset directory {d}")
    images = _stems(img_dir)
    masks = _stems(mask_dir)
    for stem in images:
        if stem not in masks:
            raise ValueError(f"image {stem!r} has no mask partner")
    for stem in masks:
        if stem not in images:
            raise ValueError(f"mask {stem!r} has no image partner")

    samples = []
    for stem in sorted(images):
        try:
            img = Image.open(images[stem]).convert("RGB")
            mask = Image.open(masks[stem]).convert("L")
        except OSError as exc:
            raise OSError(f"unreadable dataset file for {stem!r}: {exc}") from exc
        if target_size is not None and img.size != (target_size, target_size):
            img = img.resize((target_size, target_size), Image.BILINEAR)
        if target_size is not None and mask.size != (target_size, target_size):
            mask = mask.resize((target_size, target_size), Image.NEAREST)
        if img.size != mask.size:
            raise ValueError(f"size mismatch for {stem!r}: {img.size} vs {mask.size}")
        arr = np.asarray(img, dtype=np.float32) / 255.0
        samples.append(SegSample(
            name=stem,
            image=np.ascontiguousarray(arr.transpose(2, 0, 1)),
            mask=(np.asarray(mask) > 127).astype(np.float32)))
    return samples


def split_dataset(samples, spec: SplitSpec = None):
    """Deterministic seeded shuffle; the last ratio-fraction goes to
    validation. Same inputs always produce the same membership."""
    spec = spec or SplitSpec()
    n = len(samples)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    order = make_rng(spec.seed).permutation(n)
    n_val = int(round(n * spec.ratio))
    n_val = min(max(n_val, 1), n - 1)
    train = [samples[i] for i in order[: n - n_val]]
    val = [samples[i] for i in order[n - n_val :]]
    return train, val


def _ellipse_mask(size, cx, cy, ax, ay, angle):
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_synthetic(n, size, rng=None, root="data"):
    """Write n synthetic samples under root/images and root/masks.

    Each image is a noisy dark background with 1-2 bright filled ellipses;
    the mask is the exact union of the ellipses. Deterministic given the rng
    seed, byte for byte.
    """
    if size % 32:
        raise ValueError(f"size {size} must be divisible by 32")
    rng = make_rng(rng)
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for i in range(n):
        base = rng.uniform(0.05, 0.35, size=3)
        img = np.empty((size, size, 3), dtype=np.float64)
        img[:] = base
        img += rng.normal(0.0, 0.04, size=(size, size, 3))
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 3))):
            cx, cy = rng.uniform(0.25 * size, 0.75 * size, size=2)
            ax, ay = rng.uniform(size / 8.0, size / 4.0, size=2)
            angle = rng.uniform(0.0, np.pi)
            blob = _ellipse_mask(size, cx, cy, ax, ay, angle)
            color = rng.uniform(0.6, 0.95, size=3)
            img[blob] = color + rng.normal(0.0, 0.03, size=3)
            mask |= blob
        pixels = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        stem = f"sample_{i:04d}"
        Image.fromarray(pixels, mode="RGB").save(os.path.join(img_dir, stem + ".png"))
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(
            os.path.join(mask_dir, stem + ".png"))
    return root
