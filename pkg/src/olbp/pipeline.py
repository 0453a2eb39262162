"""Glue between on-disk data, synthetic scenes, the network and the metrics."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import ops, pngio
from .dataset import DatasetManifest, Scene, SceneSpec, gen_synthetic_scene, transform_sample
from .fixation import FixationMap, make_fdm, read_fixations, resize_fdm, sigma_for_width
from .model import Network, forward, image_tensor
from .tensor import no_grad
from .trainer import Sample


def make_sample(sample_id: str, image: np.ndarray, fm: FixationMap, gs: np.ndarray | None,
                gb: np.ndarray | None, input_hw: tuple[int, int], sigma: float | None = None) -> Sample:
    """Resize everything to the network input; the FDM is built at native resolution first."""
    h, w = input_hw
    sigma = sigma_for_width(fm.width) if sigma is None else sigma
    fdm = resize_fdm(make_fdm(fm, sigma), h, w).grid
    if image.shape[:2] != (h, w):
        image = np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))
    zeros = np.zeros((h, w), dtype=np.uint8)
    gs = zeros if gs is None else ops.resize_nearest_array(np.asarray(gs, dtype=np.uint8), h, w)
    gb = zeros if gb is None else ops.resize_nearest_array(np.asarray(gb, dtype=np.uint8), h, w)
    return Sample(sample_id, image_tensor(image)[0], fdm, gs, gb)


def scene_samples(scene: Scene, scene_id: str, input_hw: tuple[int, int] | None = None,
                  theta: int = 2) -> list[Sample]:
    """One sample per subject, GTs from the three-step transformation."""
    hw = input_hw or scene.labels.shape
    out = []
    for k, fm in enumerate(scene.fixation_maps):
        tr = transform_sample(scene.labels, fm, theta)
        out.append(make_sample(f"{scene_id}_s{k}", scene.image, fm, tr.binary_gt, tr.boundary_gt, hw))
    return out


def synthetic_samples(n_scenes: int, spec: SceneSpec, seed: int, prefix: str = "scene") -> list[Sample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_scenes):
        out.extend(scene_samples(gen_synthetic_scene(spec, rng), f"{prefix}{i:04d}"))
    return out


def load_record_sample(rec, root: Path, input_hw: tuple[int, int], sigma: float | None = None) -> Sample:
    image = pngio.load_rgb(root / rec.image_path)
    fm = read_fixations(root / rec.fixation_path, image.shape[1], image.shape[0])
    gs = pngio.load_mask(root / rec.binary_gt_path)
    gb = pngio.load_mask(root / rec.boundary_gt_path)
    return make_sample(rec.sample_id, image, fm, gs, gb, input_hw, sigma)


def load_manifest_samples(manifest: DatasetManifest, root, split: str | None, input_hw,
                          sigma: float | None = None) -> list[Sample]:
    root = Path(root)
    recs = manifest.records if split is None else manifest.split_records(split)
    return [load_record_sample(r, root, input_hw, sigma) for r in recs]


def predict(net: Network, samples: Sequence[Sample], batch_size: int = 8) -> list[np.ndarray]:
    """Foreground probability of the final segmentation map, one per sample."""
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            img = np.stack([s.image for s in chunk]).astype(net.dtype)
            fdm = np.stack([s.fdm for s in chunk])[:, None].astype(net.dtype)
            res = forward(net, img, fdm, training=False)
            prob = ops.softmax_probability(res.seg_final, 1).data[:, 0]
            out.extend(np.asarray(p, dtype=np.float64) for p in prob)
    return out

