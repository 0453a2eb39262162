"""Segmentation metrics, OTSU binarization and JS/KL divergence.

Conventions: predictions are probability maps in [0, 1], ground truths are
binary.  Every metric returns a float in [0, 1]; reports render them as
percentages.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

EPS = np.finfo(np.float64).eps
JS_EPS = 1e-12
COLUMNS = ("J", "S", "wF", "E", "F")


class DegenerateMapWarning(UserWarning):
    pass


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def _binary(g) -> np.ndarray:
    return np.asarray(g) > 0


# ---------------------------------------------------------------------------
# OTSU

def quantize(p: np.ndarray) -> np.ndarray:
    """Probability map to the 8-bit levels used for OTSU."""
    return np.floor(np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)


def between_class_variance(hist: np.ndarray) -> np.ndarray:
    """Between-class variance for thresholds 0..254 (class 0 = levels <= t)."""
    prob = hist.astype(np.float64) / hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(prob)[:-1]
    m0 = np.cumsum(prob * levels)[:-1]
    mu_t = (prob * levels).sum()
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        var = (mu_t * w0 - m0) ** 2 / (w0 * w1)
    var[(w0 <= 0) | (w1 <= 0)] = 0.0
    return var


def otsu_threshold(p: np.ndarray) -> int | None:
    """8-bit threshold ``t`` (mask is ``level > t``), or None for a constant map."""
    q = quantize(p)
    hist = np.bincount(q.ravel(), minlength=256)
    if np.count_nonzero(hist) < 2:
        return None
    return int(np.argmax(between_class_variance(hist)))


def otsu_binarize(p: np.ndarray) -> np.ndarray:
    t = otsu_threshold(p)
    if t is None:
        warnings.warn("constant probability map; OTSU returns an empty mask", DegenerateMapWarning)
        return np.zeros(np.shape(p), dtype=np.uint8)
    return (quantize(p) > t).astype(np.uint8)


# ---------------------------------------------------------------------------
# binary-mask metrics

def jaccard(s, g) -> float:
    s, g = _binary(s), _binary(g)
    _check_pair(s, g)
    union = np.count_nonzero(s | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(s & g) / union


def f_measure(s, g, beta2: float = 0.3) -> float:
    s, g = _binary(s), _binary(g)
    _check_pair(s, g)
    tp = np.count_nonzero(s & g)
    ns, ng = np.count_nonzero(s), np.count_nonzero(g)
    precision = tp / ns if ns else 0.0
    recall = tp / ng if ng else 0.0
    den = beta2 * precision + recall
    return (1 + beta2) * precision * recall / den if den > 0 else 0.0


def e_measure(s, g) -> float:
    """Enhanced-alignment measure of a binary map against a binary GT."""
    s_b, g_b = _binary(s), _binary(g)
    _check_pair(s_b, g_b)
    fm = s_b.astype(np.float64)
    if not g_b.any():
        enhanced = 1.0 - fm
    elif g_b.all():
        enhanced = fm
    else:
        phi_s = fm - fm.mean()
        phi_g = g_b - g_b.mean()
        align = 2.0 * phi_g * phi_s / (phi_g * phi_g + phi_s * phi_s + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


# ---------------------------------------------------------------------------
# weighted F-measure

def _gaussian_window(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return k / k.sum()


def weighted_f(p, g, beta2: float = 1.0) -> float:
    """Weighted F-measure: errors are spread by a Gaussian dependency kernel
    and background errors are weighted by distance to the object."""
    p = np.asarray(p, dtype=np.float64)
    g = _binary(g)
    _check_pair(p, g)
    if not g.any():
        warnings.warn("weighted F undefined for an empty ground truth; returning 0", DegenerateMapWarning)
        return 0.0
    err = np.abs(p - g)
    dist, (iy, ix) = ndimage.distance_transform_edt(~g, return_indices=True)
    # background pixels inherit the error of their nearest object pixel
    et = err.copy()
    bg = ~g
    et[bg] = err[iy[bg], ix[bg]]
    ea = ndimage.correlate(et, _gaussian_window(), mode="constant", cval=0.0)
    min_e = err.copy()
    pick = g & (ea < err)
    min_e[pick] = ea[pick]
    importance = np.ones_like(err)
    importance[bg] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[bg])
    ew = min_e * importance
    tpw = g.sum() - ew[g].sum()
    fpw = ew[bg].sum()
    recall = 1.0 - ew[g].mean()
    precision = tpw / (EPS + tpw + fpw)
    q = (1 + beta2) * recall * precision / (EPS + recall + beta2 * precision)
    return float(min(max(q, 0.0), 1.0))


# ---------------------------------------------------------------------------
# structure measure

def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def _std1(v: np.ndarray) -> float:
    return float(v.std(ddof=1)) if v.size > 1 else 0.0


def _object_score(x: np.ndarray) -> float:
    mu = x.mean()
    return 2.0 * mu / (mu * mu + 1.0 + _std1(x) + EPS)


def s_object(p: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    fg = np.where(g, p, 0.0)
    bg = np.where(g, 0.0, 1.0 - p)
    return u * _object_score(fg[g]) + (1 - u) * _object_score(bg[~g])


def centroid(g: np.ndarray) -> tuple[int, int]:
    """Split point ``(x, y)``: 1-based centroid rounded half away from zero."""
    h, w = g.shape
    total = g.sum()
    if total == 0:
        return _round_half_away(w / 2), _round_half_away(h / 2)
    cols = g.sum(axis=0) @ np.arange(1, w + 1)
    rows = g.sum(axis=1) @ np.arange(1, h + 1)
    return _round_half_away(cols / total), _round_half_away(rows / total)


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    x, y = p.mean(), g.mean()
    sx2 = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy2 = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (g - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx2 + sy2)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_region(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    x, y = centroid(g)
    area = w * h
    quads = [((slice(0, y), slice(0, x)), x * y / area),
             ((slice(0, y), slice(x, w)), (w - x) * y / area),
             ((slice(y, h), slice(0, x)), x * (h - y) / area)]
    quads.append(((slice(y, h), slice(x, w)), 1.0 - sum(q[1] for q in quads)))
    score = 0.0
    for sl, weight in quads:
        if p[sl].size:
            score += weight * _ssim(p[sl], g[sl].astype(np.float64))
    return score


def s_measure(p, g, lam: float = 0.5) -> float:
    p = np.asarray(p, dtype=np.float64)
    g = _binary(g)
    _check_pair(p, g)
    y = g.mean()
    if y == 0:
        q = 1.0 - p.mean()
    elif y == 1:
        q = p.mean()
    else:
        q = lam * s_object(p, g) + (1 - lam) * s_region(p, g)
    return float(min(max(q, 0.0), 1.0))


# ---------------------------------------------------------------------------
# divergences

def _distribution(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("distribution map has negative entries")
    s = a.sum()
    if not s > 0:
        raise ValueError("distribution map sums to zero and cannot be normalised")
    return a / s


def kl_divergence(p, q, eps: float = JS_EPS) -> float:
    p, q = _distribution(p), _distribution(q)
    _check_pair(p, q)
    return float(np.sum(p * np.log2(eps + p / (eps + q))))


def js_divergence(p, q, eps: float = JS_EPS) -> float:
    p, q = _distribution(p), _distribution(q)
    _check_pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m, eps) + 0.5 * kl_divergence(q, m, eps)


def mean_pairwise_js(maps: Sequence[np.ndarray], eps: float = JS_EPS) -> tuple[float, int]:
    """Mean JS over all unordered pairs; returns ``(mean, number_of_pairs)``."""
    pairs = list(itertools.combinations(range(len(maps)), 2))
    if not pairs:
        raise ValueError("need at least two maps for a pairwise JS score")
    vals = [js_divergence(maps[i], maps[j], eps) for i, j in pairs]
    return float(np.mean(vals)), len(pairs)


# ---------------------------------------------------------------------------
# dataset evaluation

def score_sample(prob: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """All five metrics for one sample, keyed by :data:`COLUMNS`."""
    prob = np.asarray(prob, dtype=np.float64)
    gt = _binary(gt)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateMapWarning)
        mask = otsu_binarize(prob)
        scores = {"J": jaccard(mask, gt), "S": s_measure(prob, gt), "wF": weighted_f(prob, gt),
                  "E": e_measure(mask, gt), "F": f_measure(mask, gt)}
    scores["flags"] = sorted({str(w.message) for w in caught})
    return scores


def _score_pair(args):
    return score_sample(*args)


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)   # sample_id + COLUMNS + flags
    missing: list[str] = field(default_factory=list)
    js: dict[str, dict] = field(default_factory=dict)  # image_id -> {"mean_js", "pairs"}

    def means(self) -> dict[str, float]:
        if not self.rows:
            return {c: float("nan") for c in COLUMNS}
        return {c: float(np.mean([r[c] for r in self.rows])) for c in COLUMNS}

    def summary(self) -> dict:
        return {"count": len(self.rows), "missing": list(self.missing),
                "means_percent": {c: round(100 * v, 1) for c, v in self.means().items()},
                "mean_js": {k: round(v["mean_js"], 4) for k, v in sorted(self.js.items())}}

    def table_line(self) -> str:
        m = self.means()
        return "  ".join(f"{c}={100 * m[c]:.1f}" for c in COLUMNS)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", *COLUMNS, "flags"])
            for r in self.rows:
                w.writerow([r["sample_id"], *(f"{100 * r[c]:.1f}" for c in COLUMNS), ";".join(r["flags"])])
            m = self.means()
            w.writerow(["mean", *(f"{100 * m[c]:.1f}" for c in COLUMNS), ""])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def evaluate_dataset(predictions: Mapping[str, np.ndarray], gts: Mapping[str, np.ndarray],
                     fdm_groups: Mapping[str, Sequence[np.ndarray]] | None = None,
                     workers: int = 1) -> EvalReport:
    """Score every sample in ``gts`` (ordered by id) against ``predictions``.

    ``fdm_groups`` maps an image id to its subjects' FDMs for the mean-JS analysis.
    """
    report = EvalReport()
    ids = sorted(gts)
    present = [i for i in ids if i in predictions]
    report.missing = [i for i in ids if i not in predictions]
    jobs = [(predictions[i], gts[i]) for i in present]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_score_pair, jobs, chunksize=8))
    else:
        results = [_score_pair(j) for j in jobs]
    report.rows = [{"sample_id": i, **r} for i, r in zip(present, results)]
    for image_id, maps in sorted((fdm_groups or {}).items()):
        if len(maps) >= 2:
            mean, pairs = mean_pairwise_js(maps)
            report.js[image_id] = {"mean_js": mean, "pairs": pairs}
    return report
