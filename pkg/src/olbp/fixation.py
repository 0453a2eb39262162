"""Fixation maps and fixation density maps (FDMs).

An FDM is the fixation impulse image blurred with a Gaussian of standard
deviation ``sigma`` (truncated at ``ceil(3 sigma)``, zero-padded borders)
and min-max normalised to [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .ops import maxpool2d
from .tensor import ShapeError, Tensor, no_grad

DEFAULT_SIGMA = 24.0  # one degree of visual angle on an 800x600 image


class EmptyFixationError(ValueError):
    """Raised for a fixation map without points."""


@dataclass
class FixationMap:
    width: int
    height: int
    points: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.points = [(int(x), int(y)) for x, y in self.points]
        for x, y in self.points:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"fixation ({x}, {y}) outside {self.width}x{self.height}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class FixationDensityMap:
    grid: np.ndarray
    sigma: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def sigma_for_width(width: int) -> float:
    """Scale the 24 px / 800 px default to another image width."""
    return DEFAULT_SIGMA * width / 800.0


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def impulse_image(fm: FixationMap) -> np.ndarray:
    img = np.zeros((fm.height, fm.width), dtype=np.float64)
    for x, y in fm.points:
        img[y, x] += 1.0
    return img


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def make_fdm(fm: FixationMap, sigma: float = DEFAULT_SIGMA) -> FixationDensityMap:
    if len(fm) == 0:
        raise EmptyFixationError("fixation map has no points")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = gaussian_kernel1d(sigma)
    blurred = ndimage.convolve1d(impulse_image(fm), k, axis=0, mode="constant", cval=0.0)
    blurred = ndimage.convolve1d(blurred, k, axis=1, mode="constant", cval=0.0)
    return FixationDensityMap(minmax(blurred), float(sigma))


def resize_fdm(fdm: FixationDensityMap, height: int, width: int) -> FixationDensityMap:
    """Bilinear resize followed by re-normalisation to [0, 1]."""
    if fdm.shape == (height, width):
        return FixationDensityMap(fdm.grid.copy(), fdm.sigma)
    img = Image.fromarray(fdm.grid.astype(np.float32), mode="F").resize((width, height), Image.BILINEAR)
    scale = width / fdm.shape[1]
    return FixationDensityMap(minmax(np.asarray(img, dtype=np.float64)), fdm.sigma * scale)


def downsample_fdm(fdm, level: int) -> Tensor:
    """Max-pool the FDM to the resolution of encoder block ``level`` (1..5)."""
    if not 1 <= level <= 5:
        raise ValueError(f"level must be in 1..5, got {level}")
    grid = fdm.grid if isinstance(fdm, FixationDensityMap) else np.asarray(fdm)
    k = 2 ** (level - 1)
    h, w = grid.shape
    if h % k or w % k:
        raise ShapeError(f"FDM {h}x{w} not divisible by {k}", axis="h" if h % k else "w")
    with no_grad():
        return maxpool2d(Tensor(grid.reshape(1, 1, h, w)), k)


def read_fixations(path, width: int, height: int) -> FixationMap:
    """Parse ``x,y`` integer pairs, one per line; ``#`` starts a comment."""
    points = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            xs, ys = line.split(",")
            points.append((int(xs), int(ys)))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: expected 'x,y', got {line!r}") from exc
    return FixationMap(width, height, points)


def write_fixations(path, fm: FixationMap) -> None:
    lines = [f"# {fm.width}x{fm.height}"] + [f"{x},{y}" for x, y in fm.points]
    Path(path).write_text("\n".join(lines) + "\n")


def save_fdm_png(path, fdm: FixationDensityMap, bits: int = 8) -> None:
    """Grayscale PNG plus a ``.json`` sidecar recording sigma."""
    path = Path(path)
    if bits == 8:
        Image.fromarray(np.round(fdm.grid * 255).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(np.round(fdm.grid * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")
    path.with_suffix(".json").write_text(json.dumps({"sigma": fdm.sigma, "bits": bits}))


def load_fdm_png(path) -> FixationDensityMap:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arr = np.asarray(Image.open(path)).astype(np.float64)
    return FixationDensityMap(arr / (255.0 if meta["bits"] == 8 else 65535.0), meta["sigma"])
