"""Differentiable tensor operations.

Layout is NCHW throughout.  Convolution uses the cross-correlation
convention (no kernel flip) and is lowered to a single matrix product over
an im2col view of the padded input.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import ArgumentError, NumericalError, ShapeError, StateError
from .tensor import Tensor, record, record_multi, register_backward

__all__ = [
    "add", "sub", "mul", "ew_binary", "scale", "sum", "mean", "reshape", "transpose",
    "slice_axis", "split", "take", "concat", "concat_channels", "conv2d", "avg_pool2d", "activation",
    "relu", "sigmoid", "tanh", "batch_norm2d", "dropout", "affine", "matmul", "softmax", "log",
]


# ---------------------------------------------------------------------------
# elementwise binary


def _is_channel_vector(a: np.ndarray, b: np.ndarray) -> bool:
    """True when 1-D ``b`` broadcasts over axis 1 of ``a`` (the bias case)."""
    return b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]


def _expand_bias(b: np.ndarray, ndim: int) -> np.ndarray:
    return b.reshape((1, -1) + (1,) * (ndim - 2))


def _reduce_bias(g: np.ndarray) -> np.ndarray:
    return _channel_sum(g)


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis except 1; faster than a multi-axis reduce on NCHW."""
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def ew_binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Elementwise ``add``/``sub``/``hadamard`` with optional per-channel bias broadcast."""
    if kind not in ("add", "sub", "hadamard"):
        raise ArgumentError(f"unknown elementwise kind {kind!r}")
    x, y = a.data, b.data
    bias = False
    if x.shape != y.shape:
        if not _is_channel_vector(x, y):
            raise ShapeError(f"{kind}: shapes {x.shape} and {y.shape} do not match")
        bias = True
        y = _expand_bias(y, x.ndim)
    if kind == "add":
        out = x + y
    elif kind == "sub":
        out = x - y
    else:
        out = x * y
    saved = (kind, bias, x if kind == "hadamard" else None, y if kind == "hadamard" else None)
    return record("ew_binary", (a, b), out, saved)


@register_backward("ew_binary")
def _ew_binary_backward(saved, g, needs):
    kind, bias, x, y = saved
    if kind == "add":
        ga, gb = g, g
    elif kind == "sub":
        ga, gb = g, (-g if needs[1] else None)
    else:
        ga = g * y if needs[0] else None
        gb = g * x if needs[1] else None
    if bias and gb is not None:
        gb = _reduce_bias(gb)
    return ga, gb


def add(a: Tensor, b: Tensor) -> Tensor:
    return ew_binary(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return ew_binary(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return ew_binary(a, b, "hadamard")


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", (x,), x.data * x.data.dtype.type(c), c)


@register_backward("scale")
def _scale_backward(c, g, needs):
    return (g * g.dtype.type(c),)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), x.shape)


@register_backward("sum")
def _sum_backward(shape, g, needs):
    return (np.broadcast_to(g, shape).copy(),)


def mean(x: Tensor) -> Tensor:
    return record("mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype), x.shape)


@register_backward("mean")
def _mean_backward(shape, g, needs):
    n = int(np.prod(shape))
    return (np.broadcast_to(g / n, shape).copy(),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return record("reshape", (x,), out, x.shape)


@register_backward("reshape")
def _reshape_backward(shape, g, needs):
    return (g.reshape(shape),)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    return record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)), axes)


@register_backward("transpose")
def _transpose_backward(axes, g, needs):
    return (np.ascontiguousarray(g.transpose(np.argsort(axes))),)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {n} on axis {axis}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    out = np.ascontiguousarray(x.data[tuple(index)])
    return record("slice_axis", (x,), out, (x.shape, tuple(index)))


@register_backward("slice_axis")
def _slice_backward(saved, g, needs):
    shape, index = saved
    gx = np.zeros(shape, dtype=g.dtype)
    gx[index] = g
    return (gx,)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ArgumentError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(ref, t.shape)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat on axis {axis}: shapes {ref} and {t.shape} disagree")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    return record("concat", tensors, out, (axis, bounds))


@register_backward("concat")
def _concat_backward(saved, g, needs):
    axis, bounds = saved
    grads = []
    for k, need in enumerate(needs):
        if not need:
            grads.append(None)
            continue
        index = [slice(None)] * g.ndim
        index[axis] = slice(bounds[k], bounds[k + 1])
        grads.append(np.ascontiguousarray(g[tuple(index)]))
    return grads


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW operands")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: batch/spatial extents differ, {a.shape} vs {b.shape}")
    return concat((a, b), axis=1)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Channel-major patch matrix of shape (C*Kh*Kw, N*Ho*Wo)."""
    n, c, h, w = x.shape
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return x.reshape(c, h * w) if n == 1 else x.transpose(1, 0, 2, 3).reshape(c, -1)
    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _to_nchw(y: np.ndarray, o: int, n: int, ho: int, wo: int) -> np.ndarray:
    y = y.reshape(o, n, ho, wo)
    return y.reshape(1, o, ho, wo) if n == 1 else np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def _from_nchw(g: np.ndarray) -> np.ndarray:
    n, o = g.shape[:2]
    return g.reshape(o, -1) if n == 1 else g.transpose(1, 0, 2, 3).reshape(o, -1)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIKhKw kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKhKw kernel, got {x.shape}, {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ArgumentError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if i != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {i}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} leaves no output on a {h}x{w} input (padding {padding})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")

    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    wmat = kernel.data.reshape(o, -1)
    y = wmat @ cols
    if bias is not None:
        y += bias.data[:, None]
    out = _to_nchw(y, o, n, ho, wo)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    saved = (cols, wmat, x.shape, kernel.shape, stride, padding, ho, wo)
    return record("conv2d", inputs, out, saved)


@register_backward("conv2d")
def _conv2d_backward(saved, g, needs):
    cols, wmat, xshape, kshape, stride, padding, ho, wo = saved
    n, c, h, w = xshape
    o, _, kh, kw = kshape
    g2 = _from_nchw(g)
    gk = (g2 @ cols.T).reshape(kshape) if needs[1] else None
    gb = g2.sum(axis=1) if len(needs) > 2 and needs[2] else None
    gx = None
    if needs[0]:
        dcols = wmat.T @ g2
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            gx = dcols.reshape(1, c, h, w) if n == 1 else np.ascontiguousarray(
                dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            )
        else:
            dcols = dcols.reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = gxp.reshape(1, c, h, w) if n == 1 else np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
            if n == 1:
                gx = np.ascontiguousarray(gx)
    return gx, gk, gb


def avg_pool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects NCHW input, got {x.shape}")
    if k < 1 or stride < 1:
        raise ArgumentError("avg_pool2d: window and stride must be positive")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"avg_pool2d: window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    if k == stride == 2 and h % 2 == 0 and w % 2 == 0:
        d = x.data
        out = (d[:, :, 0::2, 0::2] + d[:, :, 1::2, 0::2] + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 1::2]) * d.dtype.type(0.25)
    else:
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += x.data[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        out /= k * k
    return record("avg_pool2d", (x,), out, (x.shape, k, stride, ho, wo))


@register_backward("avg_pool2d")
def _avg_pool_backward(saved, g, needs):
    shape, k, stride, ho, wo = saved
    gs = g / g.dtype.type(k * k)
    n, c, h, w = shape
    if k == stride and h == k * ho and w == k * wo:
        gx = np.empty(shape, dtype=g.dtype)
        gx.reshape(n, c, ho, k, wo, k)[...] = gs[:, :, :, None, :, None]
        return (gx,)
    gx = np.zeros(shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
    return (gx,)


# ---------------------------------------------------------------------------
# activations


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        out = np.maximum(x.data, 0)
    elif kind == "sigmoid":
        out = _stable_sigmoid(x.data)
    elif kind == "tanh":
        out = np.tanh(x.data)
    else:
        raise ArgumentError(f"unknown activation {kind!r}")
    return record("activation", (x,), out, (kind, x.data if kind == "relu" else out))


@register_backward("activation")
def _activation_backward(saved, g, needs):
    kind, ref = saved
    if kind == "relu":
        return (g * (ref > 0),)
    if kind == "sigmoid":
        return (g * ref * (1 - ref),)
    return (g * (1 - ref * ref),)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", (x,), out, (out, axis))


@register_backward("softmax")
def _softmax_backward(saved, g, needs):
    s, axis = saved
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def log(x: Tensor) -> Tensor:
    """Elementwise natural log; non-positive inputs raise NumericalError."""
    if np.any(x.data <= 0):
        raise NumericalError("log: input must be strictly positive")
    return record("log", (x,), np.log(x.data), x.data)


@register_backward("log")
def _log_backward(x, g, needs):
    return (g / x,)


# ---------------------------------------------------------------------------
# normalization and regularization


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[Tensor],
    running_var: Optional[Tensor],
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In ``train`` mode the batch statistics normalize the input and the
    running buffers are updated in place (unbiased variance, exponential
    moving average with ``momentum``).  In ``eval`` mode the running buffers
    are used and must exist.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: affine parameters must have shape ({c},)")
    xc = None
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError("batch_norm2d: train mode needs at least 2 values per channel")
        mu = _channel_sum(x.data) / m
        xc = x.data - _expand_bias(mu, 4)
        var = _channel_sum(xc * xc) / m
        if running_mean is not None and running_var is not None:
            rm = (1 - momentum) * running_mean.data + momentum * mu
            rv = (1 - momentum) * running_var.data + momentum * var * (m / (m - 1))
            running_mean.data = rm.astype(running_mean.dtype)
            running_var.data = rv.astype(running_var.dtype)
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise StateError("batch_norm2d: eval mode before running statistics exist")
        mu, var = running_mean.data, running_var.data
    else:
        raise ArgumentError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    if xc is None:
        xc = x.data - _expand_bias(mu, 4)
    xhat = xc * _expand_bias(inv_std, 4)
    out = xhat * _expand_bias(gamma.data, 4) + _expand_bias(beta.data, 4)
    out = out.astype(x.dtype, copy=False)
    return record("batch_norm2d", (x, gamma, beta), out, (mode, xhat, inv_std.astype(x.dtype), gamma.data))


@register_backward("batch_norm2d")
def _batch_norm_backward(saved, g, needs):
    mode, xhat, inv_std, gamma = saved
    ggamma = _channel_sum(g * xhat)
    gbeta = _channel_sum(g)
    gx = None
    if needs[0]:
        if mode == "eval":
            gx = g * _expand_bias(gamma * inv_std, 4)
        else:
            m = g.size // g.shape[1]
            mean_g = _expand_bias(gbeta * gamma / m, 4)
            mean_gx = _expand_bias(ggamma * gamma / m, 4)
            gx = (g * _expand_bias(gamma, 4) - mean_g - xhat * mean_gx) * _expand_bias(inv_std, 4)
    return gx, (ggamma if needs[1] else None), (gbeta if needs[2] else None)


def dropout(x: Tensor, p: float, mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in ``eval`` mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ArgumentError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if mode == "eval" or p == 0:
        return x
    if mode != "train":
        raise ArgumentError(f"unknown mode {mode!r}")
    if rng is None:
        raise ArgumentError("dropout in train mode needs a seeded rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return record("dropout", (x,), x.data * mask, mask)


@register_backward("dropout")
def _dropout_backward(mask, g, needs):
    return (g * mask,)


# ---------------------------------------------------------------------------
# dense algebra


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: cannot apply {weight.shape} weights to {x.shape} input")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data + bias.data
    return record("affine", (x, weight, bias), out, (x.data, weight.data))


@register_backward("affine")
def _affine_backward(saved, g, needs):
    xd, wd = saved
    return (
        g @ wd.T if needs[0] else None,
        xd.T @ g if needs[1] else None,
        g.sum(axis=0) if needs[2] else None,
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two axes; leading axes must match."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return record("matmul", (a, b), np.matmul(a.data, b.data), (a.data, b.data))


@register_backward("matmul")
def _matmul_backward(saved, g, needs):
    ad, bd = saved
    return (
        np.matmul(g, np.swapaxes(bd, -1, -2)) if needs[0] else None,
        np.matmul(np.swapaxes(ad, -1, -2), g) if needs[1] else None,
    )


def output_extent(size: int, k: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - k) // stride + 1


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= x.shape[axis]:
        raise ShapeError(f"take: indices out of range for extent {x.shape[axis]}")
    return record("take", (x,), np.take(x.data, idx, axis=axis), (x.shape, idx, axis))


@register_backward("take")
def _take_backward(saved, g, needs):
    shape, idx, axis = saved
    gx = np.zeros(shape, dtype=g.dtype)
    np.add.at(gx, (slice(None),) * (axis % len(shape)) + (idx,), g)
    return (gx,)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> Tuple[Tensor, ...]:
    """Cut ``x`` into consecutive pieces of the given extents along ``axis``."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or builtins.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not partition extent {x.shape[axis]} on axis {axis}")
    bounds = np.cumsum([0] + sizes)
    index = [slice(None)] * x.ndim
    outs = []
    for k in range(len(sizes)):
        index[axis] = slice(bounds[k], bounds[k + 1])
        outs.append(np.ascontiguousarray(x.data[tuple(index)]))
    return record_multi("split", (x,), outs, axis)


@register_backward("split")
def _split_backward(axis, gs, needs):
    return (np.concatenate(gs, axis=axis),)
