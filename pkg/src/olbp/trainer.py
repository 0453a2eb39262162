"""SGD training with gradient accumulation, step LR schedule and resumable checkpoints.

Randomness is derived from ``(rng_seed, counter)`` pairs: epoch ``e`` is
shuffled with ``default_rng([seed, e])`` and the dropout masks of the
``j``-th forward pass of optimizer step ``t`` come from
``default_rng([seed, t, j])``.  A checkpoint therefore only needs the
iteration number to continue the exact trajectory.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .model import LOSS_TERMS, Network, OLBPConfig, forward, total_loss
from .tensor import NumericalError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 8e-8
    lr_drop_iter: int = 14_000
    lr_drop_factor: float = 10.0
    total_iters: int = 30_000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 1
    iter_size: int = 8
    dropout: float = 0.5
    rng_seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        base = dict(lr=1e-2, total_iters=2000, lr_drop_iter=1400, iter_size=1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def preset(cls, name: str, **kw) -> "TrainConfig":
        if name == "paper":
            return cls.paper(**kw)
        if name in ("toy", "tiny"):
            return cls.toy(**kw)
        raise ValueError(f"unknown preset {name!r}")

    def validate(self) -> None:
        for key in ("lr", "lr_drop_factor"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.iter_size < 1 or self.batch_size < 1 or self.total_iters < 1:
            raise ValueError("iter_size, batch_size and total_iters must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    return cfg.lr if iteration < cfg.lr_drop_iter else cfg.lr / cfg.lr_drop_factor


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> dict[str, np.ndarray]:
    """One momentum-SGD update; ``params`` and ``state`` are updated in place.

    ``v <- momentum * v + (g + weight_decay * p)``, then ``p <- p - lr * v``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        v = state.get(name)
        v = np.zeros(p.shape, dtype=np.float64) if v is None else v.astype(np.float64)
        v = momentum * v + (g.astype(np.float64) + weight_decay * p.astype(np.float64))
        state[name] = v.astype(p.dtype)
        params[name][...] = (p.astype(np.float64) - lr * v).astype(p.dtype)
    return params


class KahanSum:
    """Compensated running sum of equally shaped arrays."""

    def __init__(self):
        self.total = None
        self._c = None

    def add(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if self.total is None:
            self.total, self._c = x.copy(), np.zeros_like(x)
            return
        y = x - self._c
        t = self.total + y
        self._c = (t - self.total) - y
        self.total = t


def resize_gt_pyramid(gs: np.ndarray, gb: np.ndarray, levels: Iterable[tuple[int, int]]):
    """Nearest-resized ``(G_s, G_b)`` pair for every ``(h, w)`` in ``levels``."""
    return [(ops.resize_nearest_array(gs, h, w), ops.resize_nearest_array(gb, h, w))
            for h, w in levels]


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray     # (3, H, W) float, centred
    fdm: np.ndarray       # (H, W) in [0, 1]
    gs: np.ndarray        # (H, W) {0, 1}
    gb: np.ndarray        # (H, W) {0, 1}


def stack(samples: Sequence[Sample], dtype=np.float32):
    img = np.stack([s.image for s in samples]).astype(dtype)
    fdm = np.stack([s.fdm for s in samples])[:, None].astype(dtype)
    gs = np.stack([s.gs for s in samples])[:, None]
    gb = np.stack([s.gb for s in samples])[:, None]
    return img, fdm, gs, gb


def epoch_order(n: int, epoch: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def sample_indices(cursor: int, count: int, n: int, seed: int) -> list[int]:
    """``count`` dataset indices starting at global position ``cursor``; wraps across epochs."""
    out = []
    for pos in range(cursor, cursor + count):
        epoch, k = divmod(pos, n)
        out.append(int(epoch_order(n, epoch, seed)[k]))
    return out


@dataclass
class TrainState:
    iteration: int
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def train_hash(net_cfg: OLBPConfig, cfg: TrainConfig) -> str:
    blob = json.dumps({"model": net_cfg.to_dict(), "train": cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_train_checkpoint(path, net: Network, cfg: TrainConfig, state: TrainState) -> None:
    samples_seen = state.iteration * cfg.iter_size * cfg.batch_size
    meta = {"iteration": state.iteration, "rng": {"seed": cfg.rng_seed, "sample_cursor": samples_seen},
            "config_hash": train_hash(net.cfg, cfg), "model_config": net.cfg.to_dict(),
            "train_config": cfg.to_dict()}
    save_checkpoint(path, {"params": net.state_dict(), "momentum": state.velocity}, meta)


def load_train_checkpoint(path, net: Network | None = None):
    """Returns ``(net, TrainConfig, TrainState)``; builds the network when not given."""
    sections, meta = load_checkpoint(path)
    if net is None:
        net = Network(OLBPConfig.from_dict(meta["model_config"]))
    net.load_state_dict(sections["params"])
    cfg = TrainConfig(**meta["train_config"])
    state = TrainState(meta["iteration"], dict(sections.get("momentum", {})))
    return net, cfg, state


class CSVLog:
    """Append-only training log: iteration, lr, the 15 loss terms, total."""

    columns = ["iteration", "lr"] + list(LOSS_TERMS) + ["total"]

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._w = csv.writer(self._fh)
        if new:
            self._w.writerow(self.columns)

    def __call__(self, rec: dict) -> None:
        row = [rec["iteration"], repr(rec["lr"])]
        row += ["" if rec["terms"].get(t) is None else repr(rec["terms"][t]) for t in LOSS_TERMS]
        row.append(repr(rec["total"]))
        self._w.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def accumulate_gradients(net: Network, samples: Sequence[Sample], batches: Sequence[Sequence[int]],
                         dropout: float, seed: int, iteration: int):
    """Forward/backward every micro-batch; returns averaged grads and loss record."""
    acc = {n: KahanSum() for n in net.params}
    terms = {}
    total = 0.0
    for j, idx in enumerate(batches):
        img, fdm, gs, gb = stack([samples[i] for i in idx], net.dtype)
        net.zero_grad()
        rng = np.random.default_rng([seed, iteration, j])
        out = forward(net, img, fdm, training=True, rng=rng, dropout=dropout)
        loss = total_loss(out, gs, gb)
        loss.total.backward()
        for n, p in net.params.items():
            if p.grad is not None:
                acc[n].add(p.grad)
        for k, v in loss.terms.items():
            terms[k] = terms.get(k, 0.0) + v / len(batches)
        total += float(loss.total.data) / len(batches)
    grads = {n: (a.total / len(batches)) for n, a in acc.items() if a.total is not None}
    net.zero_grad()
    return grads, terms, total


def train_loop(net: Network, samples: Sequence[Sample], cfg: TrainConfig,
               callbacks: Sequence[Callable[[dict], None]] = (),
               state: TrainState | None = None, stop_at: int | None = None,
               checkpoint_dir=None) -> TrainState:
    """Run optimizer steps from ``state.iteration`` up to ``stop_at`` (default ``total_iters``).

    Each step consumes ``iter_size`` micro-batches of ``batch_size`` samples.
    """
    cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    state = state or TrainState(0)
    stop = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    n = len(samples)
    per_step = cfg.iter_size * cfg.batch_size
    params = {k: p.data for k, p in net.params.items() if p.learnable}
    while state.iteration < stop:
        it = state.iteration
        idx = sample_indices(it * per_step, per_step, n, cfg.rng_seed)
        batches = [idx[j * cfg.batch_size:(j + 1) * cfg.batch_size] for j in range(cfg.iter_size)]
        grads, terms, total = accumulate_gradients(net, samples, batches, cfg.dropout, cfg.rng_seed, it)
        lr = lr_schedule(it, cfg)
        sgd_step(params, {k: grads[k] for k in params if k in grads}, state.velocity,
                 lr, cfg.momentum, cfg.weight_decay)
        state.iteration = it + 1
        rec = {"iteration": state.iteration, "lr": lr, "terms": terms, "total": total}
        state.history.append(rec)
        if cfg.log_every and state.iteration % cfg.log_every == 0:
            for cb in callbacks:
                cb(rec)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_train_checkpoint(Path(checkpoint_dir) / f"ckpt_{state.iteration:06d}.olbp", net, cfg, state)
    return state
