"""Finite-difference checks for every differentiable op, in float64.

Each check builds random inputs from a seed and reduces the op output to a
scalar with a fixed random projection, so every output element
contributes a distinct weight.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .tensor import Tensor

STEP = 1e-5
TOL = 1e-4


def _t(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _projected(op: Callable[..., Tensor], out_shape, rng: np.random.Generator):
    r = rng.standard_normal(out_shape)
    return lambda *xs: ops.weighted_sum(op(*xs), r)


def _conv(seed, stride=1, padding=1, dilation=1):
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, 2, 4, 8, 8), _t(rng, 3, 4, 3, 3), _t(rng, 3)
    op = lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)  # noqa: E731
    return grad_check(_projected(op, op(x, w, b).shape, rng), [x, w, b], STEP, TOL)


def _deconv(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, 2, 4, 5, 5), _t(rng, 4, 3, 4, 4), _t(rng, 3)
    return grad_check(_projected(ops.deconv2d, (2, 3, 10, 10), rng), [x, w, b], STEP, TOL)


def _maxpool(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 8, 8)
    return grad_check(_projected(lambda x: ops.maxpool2d(x, 2), (2, 3, 4, 4), rng), [x], STEP, TOL)


def _eltwise(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, 2, 3, 5, 5), _t(rng, 2, 3, 5, 5)
    return grad_check(_projected(ops.eltwise_mul, a.shape, rng), [a, b], STEP, TOL)


def _concat(seed):
    rng = np.random.default_rng(seed)
    a, b, c = _t(rng, 2, 1, 4, 4), _t(rng, 2, 3, 4, 4), _t(rng, 2, 2, 4, 4)
    op = lambda a, b, c: ops.concat_channels([a, b, c])  # noqa: E731
    return grad_check(_projected(op, (2, 6, 4, 4), rng), [a, b, c], STEP, TOL)


def _sigmoid(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 4, 4)
    x.data *= 3
    return grad_check(_projected(ops.sigmoid, x.shape, rng), [x], STEP, TOL)


def _relu(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 4, 4)
    x.data[np.abs(x.data) < 1e-3] += 0.01  # keep clear of the kink
    return grad_check(_projected(ops.relu, x.shape, rng), [x], STEP, TOL)


def _softmax_ce(seed):
    rng = np.random.default_rng(seed)
    logits = _t(rng, 2, 2, 6, 6)
    target = (rng.random((2, 1, 6, 6)) > 0.5).astype(np.float64)
    return grad_check(lambda l: ops.softmax_ce_loss(l, target), [logits], STEP, TOL)


def _softmax_prob(seed):
    rng = np.random.default_rng(seed)
    logits = _t(rng, 2, 2, 5, 5)
    return grad_check(_projected(lambda l: ops.softmax_probability(l, 1), (2, 1, 5, 5), rng), [logits], STEP, TOL)


def _dropout(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 6, 6)
    op = lambda x: ops.dropout(x, 0.5, True, np.random.default_rng(seed))  # noqa: E731
    return grad_check(_projected(op, x.shape, rng), [x], STEP, TOL)


def _resize(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 2, 6, 6)
    op = lambda x: ops.resize_nearest(x, 9, 4)  # noqa: E731
    return grad_check(_projected(op, (2, 2, 9, 4), rng), [x], STEP, TOL)


def _add(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 4, 4)
    return grad_check(_projected(ops.add, a.shape, rng), [a, b], STEP, TOL)


def _sum(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, 2, 3, 4, 4)
    return grad_check(ops.sum_all, [a], STEP, TOL)


OP_CHECKS: dict[str, Callable[[int], GradCheckReport]] = {
    "conv2d": _conv,
    "conv2d_dilated": lambda s: _conv(s, padding=3, dilation=3),
    "conv2d_strided": lambda s: _conv(s, stride=2, padding=1, dilation=2),
    "deconv2d": _deconv,
    "maxpool2d": _maxpool,
    "eltwise_mul": _eltwise,
    "concat_channels": _concat,
    "sigmoid": _sigmoid,
    "relu": _relu,
    "softmax_ce_loss": _softmax_ce,
    "softmax_probability": _softmax_prob,
    "dropout": _dropout,
    "resize_nearest": _resize,
    "add": _add,
    "sum_all": _sum,
}


def run_op_checks(names: Iterable[str] | None = None, seeds: Iterable[int] = range(5)):
    """Yields ``(name, seed, report)``."""
    seeds = list(seeds)
    for name in (sorted(OP_CHECKS) if names is None else names):
        for seed in seeds:
            yield name, seed, OP_CHECKS[name](seed)
