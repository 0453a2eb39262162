"""Differentiable operations on rank-4 ``(n, c, h, w)`` tensors.

Only what the OLBP network needs is here.  Stride-1 convolutions run
as a channels-last im2col matmul (patches as rows, which keeps BLAS
efficient for narrow layers); the patch matrix is built in row chunks
when it would exceed ``IM2COL_LIMIT`` elements, so memory stays bounded
at the full 288x288 resolution.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, ShapeError, Tensor, as_tensor, is_grad_enabled, make_result

# largest patch matrix (in elements) built in one piece
IM2COL_LIMIT = 16_000_000

_branch_log: list[bytes] | None = None


@contextlib.contextmanager
def record_branches() -> Iterator[list[bytes]]:
    """Collect the discrete choices (ReLU masks, pool argmaxes) made inside the block.

    Finite differences are only meaningful when both perturbed evaluations
    take the same branches as the unperturbed one.
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _check4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _offset_slice(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def _im2col_nhwc(xp: np.ndarray, k: int, dilation: int, ho: int, wo: int,
                 r0: int = 0, r1: int | None = None) -> np.ndarray:
    """Patch matrix ``(n * rows * wo, k * k * c)`` for stride-1 output rows ``r0:r1``.

    ``xp`` is the padded input in ``(n, h, w, c)`` layout; columns are
    ordered ``(ki, kj, c)``.
    """
    r1 = ho if r1 is None else r1
    span = dilation * (k - 1) + 1
    v = sliding_window_view(xp[:, r0:r1 + span - 1], (span, span), axis=(1, 2))
    v = v[:, :, :wo, :, ::dilation, ::dilation]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * xp.shape[3])


def _conv_nhwc(xh: np.ndarray, w2: np.ndarray, k: int, padding: int, dilation: int,
               keep_cols: bool = False):
    """Stride-1 convolution on channels-last data with a ``(k*k*c_in, c_out)`` kernel."""
    n, h, w, ci = xh.shape
    xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xh
    ho = h + 2 * padding - dilation * (k - 1)
    wo = w + 2 * padding - dilation * (k - 1)
    per_row = n * wo * k * k * ci
    if keep_cols or per_row * ho <= IM2COL_LIMIT:
        cols = _im2col_nhwc(xp, k, dilation, ho, wo)
        out = (cols @ w2).reshape(n, ho, wo, -1)
        return out, (cols if keep_cols else None)
    out = np.empty((n, ho, wo, w2.shape[1]), dtype=np.result_type(xh, w2))
    step = max(1, IM2COL_LIMIT // per_row)
    for r0 in range(0, ho, step):
        r1 = min(ho, r0 + step)
        out[:, r0:r1] = (_im2col_nhwc(xp, k, dilation, ho, wo, r0, r1) @ w2).reshape(n, r1 - r0, wo, -1)
    return out, None


def _weight_grad_nhwc(xh: np.ndarray, g2: np.ndarray, k: int, padding: int, dilation: int,
                      ho: int, wo: int) -> np.ndarray:
    n, _, _, ci = xh.shape
    xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xh
    per_row = n * wo * k * k * ci
    if per_row * ho <= IM2COL_LIMIT:
        return _im2col_nhwc(xp, k, dilation, ho, wo).T @ g2
    gw = np.zeros((k * k * ci, g2.shape[1]), dtype=g2.dtype)
    gv = g2.reshape(n, ho, wo, -1)
    step = max(1, IM2COL_LIMIT // per_row)
    for r0 in range(0, ho, step):
        r1 = min(ho, r0 + step)
        gw += _im2col_nhwc(xp, k, dilation, ho, wo, r0, r1).T @ gv[:, r0:r1].reshape(-1, g2.shape[1])
    return gw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation, optionally dilated.

    ``weight`` has shape ``(c_out, c_in, k, k)``; ``bias`` has ``c_out``
    elements (any shape).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "conv2d input")
    _check4(weight, "conv2d weight")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid conv geometry stride={stride} padding={padding} dilation={dilation}")
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if wci != ci:
        raise ShapeError(f"input has {ci} channels, weight expects {wci}", axis="c")
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {kh}x{kw}", axis="w")
    k = kh
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1:
        raise ShapeError(f"kernel extent exceeds padded height {h + 2 * padding}", axis="h")
    if wo < 1:
        raise ShapeError(f"kernel extent exceeds padded width {w + 2 * padding}", axis="w")
    if stride != 1 or padding > dilation * (k - 1):
        return _conv2d_strided(x, weight, bias, stride, padding, dilation)

    wd = weight.data
    xh = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    w2 = wd.transpose(2, 3, 1, 0).reshape(k * k * ci, co)
    keep = x.requires_grad or weight.requires_grad
    keep = keep and is_grad_enabled() and n * ho * wo * k * k * ci <= IM2COL_LIMIT
    out_h, cols = _conv_nhwc(xh, w2, k, padding, dilation, keep_cols=keep)
    if bias is not None:
        out_h += as_tensor(bias).data.reshape(co)
    out = np.ascontiguousarray(out_h.transpose(0, 3, 1, 2))
    parents = [x, weight] + ([as_tensor(bias)] if bias is not None else [])

    def backward(g: np.ndarray):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = gh.reshape(-1, co)
        gx = gw = gb = None
        if bias is not None and parents[2].requires_grad:
            gb = g2.sum(axis=0).reshape(parents[2].shape)
        if weight.requires_grad:
            gw2 = cols.T @ g2 if cols is not None else _weight_grad_nhwc(xh, g2, k, padding, dilation, ho, wo)
            gw = np.ascontiguousarray(gw2.reshape(k, k, ci, co).transpose(3, 2, 0, 1))
        if x.requires_grad:
            # input gradient = full correlation with the rotated kernel
            w_rot = wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * co, ci)
            gxh, _ = _conv_nhwc(gh, w_rot, k, dilation * (k - 1) - padding, dilation)
            gx = np.ascontiguousarray(gxh.transpose(0, 3, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_result(out, parents, backward, "conv2d")


def _conv2d_strided(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int,
                    padding: int, dilation: int) -> Tensor:
    """Reference offset-loop convolution for arbitrary stride."""
    n, ci, h, w = x.shape
    co, _, k, _ = weight.shape
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    offsets = [(i, j) for i in range(k) for j in range(k)]
    m = n * ho * wo

    def window(i: int, j: int) -> np.ndarray:
        return xp[:, :, _offset_slice(i * dilation, ho, stride), _offset_slice(j * dilation, wo, stride)]

    out = np.zeros((co, m), dtype=np.result_type(xd, wd))
    for i, j in offsets:
        out += wd[:, :, i, j] @ window(i, j).transpose(1, 0, 2, 3).reshape(ci, m)
    out = out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + as_tensor(bias).data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)
    parents = [x, weight] + ([as_tensor(bias)] if bias is not None else [])

    def backward(g: np.ndarray):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, m)
        gx = gw = gb = None
        if bias is not None and parents[2].requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(parents[2].shape)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        if weight.requires_grad:
            gw = np.empty_like(wd)
        for i, j in offsets:
            if weight.requires_grad:
                gw[:, :, i, j] = g2 @ window(i, j).transpose(1, 0, 2, 3).reshape(ci, m).T
            if gxp is not None:
                gxp[:, :, _offset_slice(i * dilation, ho, stride),
                    _offset_slice(j * dilation, wo, stride)] += (
                    (wd[:, :, i, j].T @ g2).reshape(ci, n, ho, wo).transpose(1, 0, 2, 3))
        if gxp is not None:
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w])
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_result(out, parents, backward, "conv2d")


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
             padding: int = 1, exact_double: bool = True) -> Tensor:
    """Transposed convolution.  ``weight`` is ``(c_in, c_out, k, k)``.

    Output size is ``(h - 1) * stride - 2 * padding + k``; with the
    defaults ``k=4, stride=2, padding=1`` that is exactly ``2h``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "deconv2d input")
    _check4(weight, "deconv2d weight")
    n, ci, h, w = x.shape
    wci, co, k, k2 = weight.shape
    if wci != ci:
        raise ShapeError(f"input has {ci} channels, weight expects {wci}", axis="c")
    if k != k2:
        raise ShapeError(f"only square kernels are supported, got {k}x{k2}", axis="w")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if exact_double and (ho != 2 * h or wo != 2 * w):
        raise ValueError(f"k={k}, stride={stride}, padding={padding} does not double {h}x{w}")
    if ho < 1 or wo < 1:
        raise ShapeError("transposed convolution output would be empty")

    xd, wd = x.data, weight.data
    full_h, full_w = (h - 1) * stride + k, (w - 1) * stride + k
    m = n * h * w
    x2 = xd.transpose(1, 0, 2, 3).reshape(ci, m)
    # every tap of the kernel scatters a (co, n, h, w) slab
    taps = (wd.reshape(ci, co * k * k).T @ x2).reshape(co, k, k, n, h, w)
    full = np.zeros((n, co, full_h, full_w), dtype=taps.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, _offset_slice(i, h, stride), _offset_slice(j, w, stride)] += taps[:, i, j].transpose(1, 0, 2, 3)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + as_tensor(bias).data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)
    parents = [x, weight] + ([as_tensor(bias)] if bias is not None else [])

    def backward(g: np.ndarray):
        gfull = np.zeros((n, co, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        gtaps = np.empty((co, k, k, n, h, w), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gtaps[:, i, j] = gfull[:, :, _offset_slice(i, h, stride),
                                       _offset_slice(j, w, stride)].transpose(1, 0, 2, 3)
        gtaps = gtaps.reshape(co * k * k, m)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wd.reshape(ci, co * k * k) @ gtaps).reshape(ci, n, h, w).transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = (x2 @ gtaps.T).reshape(weight.shape)
        if bias is not None and parents[2].requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(parents[2].shape)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_result(out, parents, backward, "deconv2d")


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Non-overlapping max pooling (``kernel == stride``).

    Gradient goes to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    _check4(x, "maxpool2d input")
    stride = kernel if stride is None else stride
    if kernel != stride:
        raise ValueError("maxpool2d supports kernel == stride only")
    if kernel < 1:
        raise ValueError("kernel must be >= 1")
    n, c, h, w = x.shape
    if h % kernel:
        raise ShapeError(f"height {h} not divisible by pool size {kernel}", axis="h")
    if w % kernel:
        raise ShapeError(f"width {w} not divisible by pool size {kernel}", axis="w")
    if kernel == 1:
        return make_result(x.data.copy(), [x], lambda g: (g,), "maxpool2d")
    ho, wo = h // kernel, w // kernel
    win = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    if _branch_log is not None:
        _branch_log.append(idx.astype(np.int32).tobytes())
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gw = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(np.ascontiguousarray(out), [x], backward, "maxpool2d")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        axis = "shape"
        if a.data.ndim == b.data.ndim == 4:
            axis = next(name for name, p, q in zip("nchw", a.shape, b.shape) if p != q)
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ", axis=axis)


def eltwise_mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "eltwise_mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, [a, b], lambda g: (g * bd, g * ad), "mul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, [a, b], lambda g: (g, g), "add")


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data * factor, [a], lambda g: (g * factor,), "scale")


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return make_result(np.asarray(a.data.sum()), [a], lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(a * weights)`` with a constant weight array."""
    a = as_tensor(a)
    wts = np.asarray(weights, dtype=a.dtype)
    if wts.shape != a.shape:
        raise ShapeError(f"weights {wts.shape} vs tensor {a.shape}")
    return make_result(np.asarray((a.data * wts).sum()), [a], lambda g: (g * wts,), "weighted_sum")


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    terms = [as_tensor(t) for t in terms]
    if not terms:
        raise ValueError("add_scalars needs at least one term")
    total = np.asarray(sum(float(t.data) for t in terms), dtype=terms[0].dtype)
    return make_result(total, terms, lambda g: tuple(g for _ in terms), "add_scalars")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    for p in parts:
        _check4(p, "concat_channels part")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        for axis, want, got in (("n", n, p.shape[0]), ("h", h, p.shape[2]), ("w", w, p.shape[3])):
            if want != got:
                raise ShapeError(f"concat_channels: {axis} is {got}, expected {want}", axis=axis)
    if len(parts) == 1:
        return make_result(parts[0].data.copy(), parts, lambda g: (g,), "concat")
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g: np.ndarray):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make_result(out, parts, backward, "concat")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(np.packbits(mask).tobytes())
    return make_result(x.data * mask, [x], lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return make_result(y, [x], lambda g: (g * y * (1 - y),), "sigmoid")


def softmax_probability(logits: Tensor, index: int = 1) -> Tensor:
    """Softmax over channels, keeping only channel ``index`` as ``(n,1,h,w)``."""
    logits = as_tensor(logits)
    _check4(logits, "softmax_probability input")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    pk = p[:, index:index + 1]

    def backward(g: np.ndarray):
        onehot = np.zeros_like(p)
        onehot[:, index] = 1.0
        return (g * pk * (onehot - p),)

    return make_result(np.ascontiguousarray(pk), [logits], backward, "softmax_prob")


def softmax_ce_loss(logits: Tensor, target) -> Tensor:
    """Mean per-pixel two-class cross-entropy.

    ``target`` is ``(n, 1, h, w)`` (or ``(h, w)``) with values in {0, 1};
    it is treated as a constant.
    """
    logits = as_tensor(logits)
    _check4(logits, "softmax_ce_loss logits")
    n, c, h, w = logits.shape
    if c != 2:
        raise ShapeError(f"softmax_ce_loss expects 2 channels, got {c}", axis="c")
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    t = t.reshape(n, 1, h, w) if t.size == n * h * w else t
    if t.shape != (n, 1, h, w):
        raise ShapeError(f"target shape {t.shape} does not match logits {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("softmax_ce_loss target must be binary {0, 1}")
    t = t.astype(np.int64)
    xd = logits.data
    mx = xd.max(axis=1, keepdims=True)
    lse = mx + np.log(np.exp(xd - mx).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(xd, t, axis=1)
    count = n * h * w
    loss = np.asarray((lse - picked).sum() / count, dtype=xd.dtype)

    def backward(g: np.ndarray):
        p = np.exp(xd - lse)
        np.put_along_axis(p, t, np.take_along_axis(p, t, axis=1) - 1.0, axis=1)
        return (p * (g / count),)

    return make_result(loss, [logits], backward, "softmax_ce")


def dropout_mask(shape, ratio: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    keep = rng.random(shape) >= ratio
    return keep.astype(dtype) / dtype(1.0 - ratio)


def dropout(x: Tensor, ratio: float, training: bool, rng_seed=None) -> Tensor:
    """Inverted dropout.  ``rng_seed`` may be an int or a numpy Generator."""
    x = as_tensor(x)
    if not 0 <= ratio < 1:
        raise ValueError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if not training or ratio == 0:
        return make_result(x.data, [x], lambda g: (g,), "dropout")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    mask = dropout_mask(x.shape, ratio, rng, x.dtype.type)
    return make_result(x.data * mask, [x], lambda g: (g * mask,), "dropout")


def nearest_indices(size_in: int, size_out: int) -> np.ndarray:
    return np.minimum((np.arange(size_out) * size_in) // size_out, size_in - 1)


def resize_nearest(x: Tensor, h_out: int, w_out: int) -> Tensor:
    x = as_tensor(x)
    _check4(x, "resize_nearest input")
    if h_out < 1 or w_out < 1:
        raise ValueError("target size must be >= 1")
    n, c, h, w = x.shape
    if (h, w) == (h_out, w_out):
        return make_result(x.data.copy(), [x], lambda g: (g,), "resize")
    ri, ci = nearest_indices(h, h_out), nearest_indices(w, w_out)
    out = x.data[:, :, ri][:, :, :, ci]

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
        return (gx,)

    return make_result(np.ascontiguousarray(out), [x], backward, "resize")


def resize_nearest_array(a: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D array (used for ground truths)."""
    h, w = a.shape
    if (h, w) == (h_out, w_out):
        return a.copy()
    return a[nearest_indices(h, h_out)][:, nearest_indices(w, w_out)]


def fans(shape: Sequence[int]) -> tuple[int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ValueError(f"cannot compute fans for shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape: Sequence[int], rng_seed, name: str = "w", dtype=np.float32) -> Parameter:
    """Glorot-uniform parameter: U(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = fans(shape)
    if fan_in == 0 or fan_out == 0:
        raise ValueError(f"zero fan for shape {tuple(shape)}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    data = rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)
    return Parameter(data, name=name)
