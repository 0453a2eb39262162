"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import NumericalError, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: tuple[int, int] | None = None
    per_input: list[float] = field(default_factory=list)
    skipped: int = 0  # entries where every step crossed a kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, scale: float) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor) with ``floor = 1e-6 * max(scale, 1)``.

    The floor keeps entries whose true gradient is ~0 from dominating.
    """
    floor = 1e-6 * max(scale, 1.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _evaluate(fn, inputs, kink_aware: bool) -> tuple[float, bytes | None]:
    if not kink_aware:
        return float(fn(*inputs).data), None
    with ops.record_branches() as log:
        val = float(fn(*inputs).data)
    return val, b"".join(log)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               tol: float = 1e-4, indices: Sequence[Sequence[int]] | None = None,
               kink_aware: bool = False, shrink: int = 3) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    ``inputs`` should hold float64 tensors with ``requires_grad`` set.
    ``indices`` optionally restricts the check to chosen flat positions per
    input (used for large parameter sets).

    With ``kink_aware`` a difference quotient is rejected when the perturbed
    passes switch a ReLU or pool branch; the step is divided by 10 up to
    ``shrink`` times, after which the entry is skipped and counted.
    """
    for t in inputs:
        t.grad = None
    if kink_aware:
        with ops.record_branches() as log:
            out = fn(*inputs)
        base_sig = b"".join(log)
    else:
        out, base_sig = fn(*inputs), None
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("closure produced a non-finite value")
    out.backward()
    worst_val, worst = 0.0, None
    per_input = []
    checked = skipped = 0
    for k, t in enumerate(inputs):
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1).astype(np.float64)
        if not np.all(np.isfinite(analytic)):
            raise NumericalError(f"non-finite analytic gradient for input {k}")
        flat = t.data.reshape(-1)
        pos = np.arange(flat.size) if indices is None else np.asarray(indices[k], dtype=np.int64)
        numeric = np.full(len(pos), np.nan)
        for slot, p in enumerate(pos):
            orig = flat[p]
            h = step
            for _ in range(shrink + 1 if kink_aware else 1):
                flat[p] = orig + h
                fp, sig_p = _evaluate(fn, inputs, kink_aware)
                flat[p] = orig - h
                fm, sig_m = _evaluate(fn, inputs, kink_aware)
                flat[p] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericalError(f"non-finite value while perturbing input {k}[{p}]")
                if sig_p == base_sig and sig_m == base_sig:
                    numeric[slot] = (fp - fm) / (2 * h)
                    break
                h /= 10
        keep = ~np.isnan(numeric)
        skipped += int(np.sum(~keep))
        pos, numeric = pos[keep], numeric[keep]
        a = analytic[pos]
        errs = relative_errors(a, numeric, float(np.max(np.abs(numeric), initial=0.0)))
        checked += len(pos)
        e = float(errs.max(initial=0.0))
        per_input.append(e)
        if e >= worst_val and len(pos):
            worst_val, worst = e, (k, int(pos[int(errs.argmax())]))
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst_val, tol, checked, worst, per_input, skipped)


def pick_indices(sizes: Sequence[int], count: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Spread ``count`` flat positions over tensors of the given sizes (tensor chosen uniformly)."""
    owners = rng.integers(0, len(sizes), size=count)
    return [np.unique(rng.integers(0, sizes[k], size=int(np.sum(owners == k)))) for k in range(len(sizes))]


def network_grad_check(cfg, n_params: int = 50, seed: int = 0, step: float = 1e-5,
                       tol: float = 1e-3, kink_aware: bool = True) -> GradCheckReport:
    """Finite-difference check of the total loss w.r.t. ``n_params`` sampled weights, in float64."""
    from .model import Network, forward, total_loss

    net = Network(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed)
    h, w, _ = cfg.input_size
    img = rng.uniform(-0.5, 0.5, (1, 3, h, w))
    fdm = rng.random((1, 1, h, w))
    gs = (rng.random((1, 1, h, w)) > 0.5).astype(np.uint8)
    gb = (rng.random((1, 1, h, w)) > 0.8).astype(np.uint8)
    params = list(net.params.values())
    idx = pick_indices([p.data.size for p in params], n_params, rng)

    def loss(*_):
        return total_loss(forward(net, img, fdm, training=False), gs, gb).total

    return grad_check(loss, params, step=step, tol=tol, indices=idx, kink_aware=kink_aware)
