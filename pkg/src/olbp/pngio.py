"""PNG readers and writers for images, label maps and masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# fixed pseudo-random palette so indexed label PNGs are viewable
_PALETTE = np.random.default_rng(12345).integers(0, 256, size=(256, 3), dtype=np.uint8)
_PALETTE[0] = 0


def save_rgb(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path, optimize=False)


def load_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def save_labels(path, labels: np.ndarray) -> None:
    """8-bit indexed PNG where the pixel index is the label."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("labels must fit in 0..255")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(_PALETTE.reshape(-1).tolist())
    im.save(path, optimize=False)


def load_labels(path) -> np.ndarray:
    im = Image.open(path)
    if im.mode not in ("P", "L"):
        raise ValueError(f"{path}: label PNG must be indexed or grayscale, got mode {im.mode}")
    return np.asarray(im, dtype=np.int64)


def save_mask(path, mask: np.ndarray) -> None:
    """Binary mask as 8-bit PNG with values {0, 255}."""
    Image.fromarray(np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8), mode="L").save(path, optimize=False)


def load_mask(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def save_probability(path, prob: np.ndarray) -> None:
    """Probability map in [0, 1] as 8-bit grayscale."""
    q = np.floor(np.clip(prob, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, optimize=False)


def load_probability(path) -> np.ndarray:
    return np.asarray(Image.open(Path(path)).convert("L"), dtype=np.float64) / 255.0
