"""Offline stand-in for CIFAR-10 built from scikit-image's bundled photographs.

Each of ten source photographs is one class.  Samples are 32x32 crops taken at
several scales with mild per-channel gain/offset jitter and random horizontal
flips, quantized to 8 bits.  Every scaled photograph is tiled into 40x40
blocks; a fixed quarter of the blocks feeds the test split and the rest the
train split, and crops never straddle blocks, so the splits share no pixels.
"""

from __future__ import annotations

import numpy as np

from .attack import LabeledDataset
from .errors import ValidationError

SOURCES = (
    "astronaut",
    "coffee",
    "chelsea",
    "rocket",
    "hubble_deep_field",
    "immunohistochemistry",
    "retina",
    "brick",
    "grass",
    "gravel",
)
SCALES = (1.0, 1.5, 2.0, 3.0)
BLOCK = 40
TEST_EVERY = 4


def _load_sources():
    import skimage.data
    from skimage.transform import rescale

    pyramids = []
    for name in SOURCES:
        img = getattr(skimage.data, name)()
        img = img.astype(np.float64) / 255.0
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        img = img[..., :3]
        levels = []
        for s in SCALES:
            if s == 1.0:
                levels.append(img)
            else:
                levels.append(rescale(img, 1.0 / s, anti_aliasing=True, channel_axis=2))
        pyramids.append(levels)
    return pyramids


def _blocks(img: np.ndarray, split: str) -> list:
    """Non-overlapping BLOCK x BLOCK tiles; tile ``i`` is a test tile when ``i % TEST_EVERY == 0``."""
    rows, cols = img.shape[0] // BLOCK, img.shape[1] // BLOCK
    out = []
    for i in range(rows * cols):
        if (i % TEST_EVERY == 0) == (split == "test"):
            r, c = divmod(i, cols)
            out.append(img[r * BLOCK : (r + 1) * BLOCK, c * BLOCK : (c + 1) * BLOCK])
    return out


def _crops(levels, n: int, split: str, rng: np.random.Generator, size: int) -> np.ndarray:
    out = np.empty((n, 3, size, size))
    blocks = [b for level in levels for b in _blocks(level, split)]
    for i in range(n):
        b = blocks[rng.integers(len(blocks))]
        y = rng.integers(0, BLOCK - size + 1)
        x = rng.integers(0, BLOCK - size + 1)
        patch = b[y : y + size, x : x + size].transpose(2, 0, 1)
        gain = rng.uniform(0.85, 1.15, size=(3, 1, 1))
        offset = rng.uniform(-0.06, 0.06, size=(3, 1, 1))
        patch = patch * gain + offset
        if rng.random() < 0.5:
            patch = patch[:, :, ::-1]
        out[i] = patch
    return out


def make_standin(n_train: int = 5000, n_test: int = 1000, seed: int = 0, size: int = 32):
    """Return ``(train, test)`` datasets with balanced classes in shuffled order."""
    if size > BLOCK:
        raise ValidationError(f"crop size {size} exceeds block size {BLOCK}")
    rng = np.random.default_rng(seed)
    pyramids = _load_sources()
    k = len(SOURCES)
    splits = []
    for split, n in (("train", n_train), ("test", n_test)):
        per_class = [n // k + (1 if c < n % k else 0) for c in range(k)]
        images = np.concatenate([_crops(p, m, split, rng, size) for p, m in zip(pyramids, per_class)])
        labels = np.concatenate([np.full(m, c) for c, m in enumerate(per_class)])
        order = rng.permutation(n)
        images = np.floor(np.clip(images[order], 0.0, 1.0) * 255.0 + 0.5) / 255.0
        splits.append(LabeledDataset(images.astype(np.float32), labels[order], num_classes=k))
    return splits[0], splits[1]
