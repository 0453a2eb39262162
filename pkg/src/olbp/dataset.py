"""Turning semantic annotations plus personal fixations into PFOS samples.

The transformation runs in three steps: collect the label under every
fixation, distill them (drop background label 0 and duplicates), then
keep only the distilled labels as foreground.  Boundary ground truth is
the ring ``Dilate(G_s; theta) - G_s``.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .fixation import FixationMap

DEFAULT_THETA = 2


class NoGazedObjectError(ValueError):
    """Every fixation fell on background, so there is nothing to segment."""


class FixationOutOfBoundsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# three-step transformation

def collect_labels(sem: np.ndarray, fm: FixationMap) -> list[int]:
    """Label under each fixation, in fixation order, duplicates kept."""
    if len(fm) == 0:
        raise ValueError("fixation map has no points")
    h, w = sem.shape
    out = []
    for x, y in fm.points:
        if not (0 <= x < w and 0 <= y < h):
            raise FixationOutOfBoundsError(f"fixation ({x}, {y}) lies outside the {w}x{h} label map")
        out.append(int(sem[y, x]))
    return out


def distill_labels(raw: Iterable[int]) -> set[int]:
    gazed = {int(v) for v in raw if v != 0}
    if not gazed:
        raise NoGazedObjectError("no gazed object: all fixations are on background")
    return gazed


def create_binary_gt(sem: np.ndarray, gazed: Iterable[int]) -> np.ndarray:
    gazed = sorted(set(gazed))
    if not gazed:
        raise ValueError("gazed label set is empty")
    present = set(np.unique(sem).tolist())
    unknown = [g for g in gazed if g not in present]
    if unknown:
        raise ValueError(f"labels {unknown} do not occur in the semantic map")
    return np.isin(sem, gazed).astype(np.uint8)


def classify_fm(sem: np.ndarray, fm: FixationMap) -> bool:
    """True when the map is constrained, i.e. no fixation lands on label 0."""
    return all(v != 0 for v in collect_labels(sem, fm))


def make_boundary_gt(gs: np.ndarray, theta: int = DEFAULT_THETA) -> np.ndarray:
    """Pixels outside ``gs`` within Euclidean distance ``theta`` of it."""
    if theta < 1:
        raise ValueError("theta must be >= 1")
    gs = np.asarray(gs) > 0
    if not gs.any() or gs.all():
        return np.zeros(gs.shape, dtype=np.uint8)
    dist = ndimage.distance_transform_edt(~gs)
    return ((dist <= theta) & ~gs).astype(np.uint8)


@dataclass
class TransformResult:
    binary_gt: np.ndarray
    boundary_gt: np.ndarray
    constrained: bool
    gazed: set[int]


def transform_sample(sem: np.ndarray, fm: FixationMap, theta: int = DEFAULT_THETA) -> TransformResult:
    raw = collect_labels(sem, fm)
    gazed = distill_labels(raw)
    gs = create_binary_gt(sem, gazed)
    return TransformResult(gs, make_boundary_gt(gs, theta), all(v != 0 for v in raw), gazed)


def noise_count(fraction: float, n: int) -> int:
    # guard against 0.3 * 10 == 3.0000000000000004
    return math.ceil(round(fraction * n, 9))


def inject_noise(sem: np.ndarray, fm: FixationMap, fraction: float, rng_seed) -> FixationMap:
    """Append ``ceil(fraction * len(fm))`` fixations drawn uniformly from background."""
    if not 0 < fraction < 1:
        raise ValueError("noise fraction must lie in (0, 1)")
    ys, xs = np.nonzero(sem == 0)
    if len(ys) == 0:
        raise ValueError("no background pixels to place noise fixations on")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    pick = rng.integers(0, len(ys), size=noise_count(fraction, len(fm)))
    extra = [(int(xs[i]), int(ys[i])) for i in pick]
    return FixationMap(fm.width, fm.height, list(fm.points) + extra)


# ---------------------------------------------------------------------------
# manifest

@dataclass
class SampleRecord:
    sample_id: str
    image_id: str
    subject: str
    image_path: str
    fixation_path: str
    semantic_gt_path: str
    binary_gt_path: str
    boundary_gt_path: str
    constrained: bool
    split: str = "unassigned"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class DatasetManifest:
    records: list[SampleRecord] = field(default_factory=list)
    rejected: list[str] = field(default_factory=list)

    @property
    def image_ids(self) -> list[str]:
        return sorted({r.image_id for r in self.records})

    def split_records(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def stats(self) -> dict:
        n = len(self.records)
        c = sum(r.constrained for r in self.records)
        return {"total": n, "constrained": c, "unconstrained": n - c,
                "train": len(self.split_records("train")), "test": len(self.split_records("test"))}

    def write(self, path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records))

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        recs = [SampleRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
        return cls(recs)


def format_count(count: int, total: int) -> str:
    pct = 100.0 * count / total if total else 0.0
    return f"{count:,} ({pct:.1f}%)"


def stats_line(manifest: DatasetManifest) -> str:
    s = manifest.stats()
    return (f"fixation maps: {s['total']:,}  constrained: {format_count(s['constrained'], s['total'])}"
            f"  unconstrained: {format_count(s['unconstrained'], s['total'])}")


def split_dataset(manifest: DatasetManifest, train_images: int, rng_seed) -> DatasetManifest:
    """Image-level split; every fixation map follows its image."""
    ids = manifest.image_ids
    if not 0 <= train_images < len(ids):
        raise ValueError(f"train_images must be < {len(ids)} images")
    rng = np.random.default_rng(rng_seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    train = set(order[:train_images])
    recs = [SampleRecord(**{**asdict(r), "split": "train" if r.image_id in train else "test"})
            for r in manifest.records]
    return DatasetManifest(recs, list(manifest.rejected))


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class SceneSpec:
    size: int = 64
    objects: tuple[int, int] = (3, 4)
    shapes: tuple[str, ...] = ("rectangle", "ellipse", "blob")
    object_size: tuple[int, int] = (12, 24)
    subjects: int = 2
    objects_per_subject: tuple[int, int] = (1, 2)
    fixations_per_object: tuple[int, int] = (3, 6)
    bg_fix_prob: float = 0.0
    bg_fixations: tuple[int, int] = (1, 3)
    max_retries: int = 200


@dataclass
class Scene:
    image: np.ndarray
    labels: np.ndarray
    fixation_maps: list[FixationMap]
    gazed: list[set[int]]


class UnsatisfiableSceneError(RuntimeError):
    pass


def _shape_mask(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    if kind == "ellipse":
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    if kind == "blob":
        m = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(3, 6))):
            ry, rx = rng.uniform(0.25, 0.45) * h, rng.uniform(0.25, 0.45) * w
            oy, ox = rng.uniform(ry, h - ry), rng.uniform(rx, w - rx)
            m |= ((yy - oy) / ry) ** 2 + ((xx - ox) / rx) ** 2 <= 1.0
        lab, n = ndimage.label(m)
        if n > 1:
            sizes = ndimage.sum(m, lab, range(1, n + 1))
            m = lab == (1 + int(np.argmax(sizes)))
        return m
    raise ValueError(f"unknown shape {kind!r}")


def _texture(h: int, w: int, color: np.ndarray, rng: np.random.Generator, amp: float) -> np.ndarray:
    base = np.broadcast_to(color, (h, w, 3)).astype(np.float64)
    coarse = ndimage.zoom(rng.standard_normal((max(2, h // 8), max(2, w // 8))), (h / max(2, h // 8), w / max(2, w // 8)), order=1)
    coarse = coarse[:h, :w]
    fine = rng.standard_normal((h, w))
    return base + amp * (0.6 * coarse + 0.4 * fine)[..., None]


def gen_synthetic_scene(spec: SceneSpec, rng_seed) -> Scene:
    """Labelled non-overlapping shapes on a textured background, plus one
    fixation map per simulated subject."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    s = spec.size
    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    labels = np.zeros((s, s), dtype=np.int64)
    occupied = np.zeros((s, s), dtype=bool)
    hues = (rng.uniform() + np.arange(n_obj) / n_obj) % 1.0
    bg_color = rng.uniform(60, 190, size=3)
    image = _texture(s, s, bg_color, rng, amp=25.0)
    for obj in range(1, n_obj + 1):
        for _ in range(spec.max_retries):
            kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
            oh, ow = (int(rng.integers(spec.object_size[0], spec.object_size[1] + 1)) for _ in range(2))
            if oh > s or ow > s:
                continue
            y0, x0 = int(rng.integers(0, s - oh + 1)), int(rng.integers(0, s - ow + 1))
            m = _shape_mask(kind, oh, ow, rng)
            full = np.zeros((s, s), dtype=bool)
            full[y0:y0 + oh, x0:x0 + ow] = m
            # keep a one-pixel gap so boundaries never touch
            if (ndimage.binary_dilation(full) & occupied).any() or full.sum() < 4:
                continue
            labels[full] = obj
            occupied |= full
            color = 255 * np.array(colorsys.hsv_to_rgb(hues[obj - 1], rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.95)))
            tex = _texture(s, s, color, rng, amp=15.0)
            image[full] = tex[full]
            break
        else:
            raise UnsatisfiableSceneError(f"could not place object {obj} of {n_obj} on a {s}x{s} canvas")
    image = np.clip(np.round(image), 0, 255).astype(np.uint8)

    bg_y, bg_x = np.nonzero(labels == 0)
    fms, gazed = [], []
    for _ in range(spec.subjects):
        k = int(rng.integers(spec.objects_per_subject[0], min(spec.objects_per_subject[1], n_obj) + 1))
        chosen = sorted(int(v) + 1 for v in rng.choice(n_obj, size=k, replace=False))
        pts = []
        for obj in chosen:
            ys, xs = np.nonzero(labels == obj)
            for i in rng.integers(0, len(ys), size=int(rng.integers(spec.fixations_per_object[0], spec.fixations_per_object[1] + 1))):
                pts.append((int(xs[i]), int(ys[i])))
        if rng.uniform() < spec.bg_fix_prob and len(bg_y):
            for i in rng.integers(0, len(bg_y), size=int(rng.integers(spec.bg_fixations[0], spec.bg_fixations[1] + 1))):
                pts.append((int(bg_x[i]), int(bg_y[i])))
        order = rng.permutation(len(pts))
        fms.append(FixationMap(s, s, [pts[i] for i in order]))
        gazed.append(set(chosen))
    return Scene(image, labels, fms, gazed)
