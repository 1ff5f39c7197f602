"""Differentiable primitives.

Every primitive computes its forward value with numpy (or a fused kernel) and
registers a reverse rule mapping the output gradient to one gradient per input.
Binary elementwise ops broadcast numpy-style; their reverse rules sum the
gradient back down to each input's shape.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import AxisError, NonFiniteError, ShapeError, Tensor, as_tensor

LAYER_NORM_EPS = 1e-5


def _const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise AxisError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (_norm_axis(axis, ndim),)
    return tuple(sorted(_norm_axis(a, ndim) for a in axis))


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._result(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad * bd, (a, b), back, "mul")


def div(a, b):
    a, b = (a, _const(b, a)) if isinstance(a, Tensor) else (_const(a, b), b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), back, "div")


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._result(out, (a,), lambda g: (g / ad,), "log")


def abs(a):  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return Tensor._result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def square(a):
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def gelu(a):
    ad = np.ascontiguousarray(a.data)
    out = kernels.gelu_forward(ad.reshape(-1)).reshape(ad.shape)

    def back(g):
        gx = kernels.gelu_backward(ad.reshape(-1), np.ascontiguousarray(g, dtype=ad.dtype).reshape(-1))
        return (gx.reshape(ad.shape),)

    return Tensor._result(out, (a,), back, "gelu")


def smooth_l1(a, b, beta):
    """Elementwise Huber-style loss: 0.5 d^2/beta below beta, |d| - beta/2 above."""
    if beta <= 0:
        raise ValueError("smooth_l1 needs beta > 0")
    a = as_tensor(a)
    b = _const(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1: shapes {a.shape} and {b.shape} differ")
    ad = np.ascontiguousarray(a.data)
    bd = np.ascontiguousarray(b.data, dtype=ad.dtype)
    out = kernels.smooth_l1_forward(ad.reshape(-1), bd.reshape(-1), float(beta)).reshape(ad.shape)

    def back(g):
        gc = np.ascontiguousarray(g, dtype=ad.dtype).reshape(-1)
        ga = kernels.smooth_l1_backward(ad.reshape(-1), bd.reshape(-1), float(beta), gc).reshape(ad.shape)
        return ga, -ga

    return Tensor._result(out, (a, b), back, "smooth_l1")


def stop_gradient(a):
    """Same values, no gradient path."""
    return Tensor(a.data)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # (..., m, k) @ (k, n): one GEMM over the folded leading dims
        a2 = ad.reshape(-1, k_a)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._result(out, (a, b), back, "matmul")

    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._result(out, (a, b), back, "matmul")


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    count = 1
    for ax in axes:
        count *= shape[ax]

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._result(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), back, "mean")


# ---------------------------------------------------------------- shape


def reshape(a, shape):
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(_norm_axis(ax, a.ndim) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise AxisError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape):
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def swapaxes(a, ax1, ax2):
    perm = list(range(a.ndim))
    i, j = _norm_axis(ax1, a.ndim), _norm_axis(ax2, a.ndim)
    perm[i], perm[j] = perm[j], perm[i]
    return transpose(a, perm)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    ax = _norm_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    out = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._result(out, tuple(tensors), back, "concat")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index):
    shape, dtype = a.shape, a.dtype
    try:
        out = a.data[index]
    except IndexError as exc:
        raise IndexError(f"index out of range for shape {shape}: {exc}") from None
    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.asarray(out), (a,), back, "getitem")


def gather(a, indices, axis=0):
    """Select entries of ``a`` at integer ``indices`` along ``axis``."""
    ax = _norm_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather: index out of range for axis {ax} of size {n}")
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim))))
        return (full,)

    return Tensor._result(np.take(a.data, idx, axis=ax), (a,), back, "gather")


def scatter(values, index, shape):
    """Zeros of ``shape`` with ``values`` added at the numpy ``index``.

    Inverse bookkeeping of ``getitem``: ``scatter(x[idx], idx, x.shape)``
    reproduces ``x`` on the indexed positions and zero elsewhere.
    """
    vd = values.data
    out = np.zeros(shape, dtype=vd.dtype)
    try:
        np.add.at(out, index, vd)
    except IndexError as exc:
        raise IndexError(f"scatter: {exc}") from None
    except ValueError:
        raise ShapeError(f"scatter: values {vd.shape} do not fit index into {tuple(shape)}") from None

    def back(g):
        return (g[index],)

    return Tensor._result(out, (values,), back, "scatter")


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients accumulate into the looked-up rows."""
    idx = np.asarray(ids, dtype=np.intp)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding: id out of range for table of {n} rows")
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return Tensor._result(table.data[idx], (table,), back, "embedding")


# ---------------------------------------------------------------- normalisation


def _rows(x, axis):
    """Move ``axis`` last and view as contiguous 2-D rows."""
    ax = _norm_axis(axis, x.ndim)
    moved = np.moveaxis(x, ax, -1) if ax != x.ndim - 1 else x
    m = np.ascontiguousarray(moved)
    return ax, m.shape, m.reshape(-1, m.shape[-1])


def _unrows(r, ax, moved_shape, ndim):
    out = r.reshape(moved_shape)
    if ax != ndim - 1:
        out = np.moveaxis(out, -1, ax)
    return out


def softmax(a, axis=-1, keep=None):
    """Softmax along ``axis``.

    ``keep`` is an optional boolean mask of shape (R, C) over the trailing two
    axes (only with ``axis=-1``); excluded entries get probability 0.
    """
    ax, mshape, x2 = _rows(a.data, axis)
    km = None
    if keep is not None:
        if ax != a.ndim - 1:
            raise AxisError("softmax: keep-mask requires the last axis")
        km = np.ascontiguousarray(keep, dtype=bool)
        if km.shape != a.shape[-2:]:
            raise ShapeError(f"softmax: mask {km.shape} does not match trailing dims {a.shape[-2:]}")
        if not km.any(axis=1).all():
            raise ValueError("softmax: a mask row excludes every entry")
    y2 = kernels.softmax_forward(x2, km)
    out = _unrows(y2, ax, mshape, a.ndim)

    def back(g):
        _, _, g2 = _rows(g, ax)
        return (_unrows(kernels.softmax_backward(y2, g2), ax, mshape, a.ndim),)

    return Tensor._result(out, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    ax, mshape, x2 = _rows(a.data, axis)
    y2 = kernels.log_softmax_forward(x2)
    out = _unrows(y2, ax, mshape, a.ndim)

    def back(g):
        _, _, g2 = _rows(g, ax)
        return (_unrows(kernels.log_softmax_backward(y2, g2), ax, mshape, a.ndim),)

    return Tensor._result(out, (a,), back, "log_softmax")


def layer_norm(a, gamma, beta, eps=LAYER_NORM_EPS):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    w = a.shape[-1]
    if gamma.shape != (w,) or beta.shape != (w,):
        raise ShapeError(f"layer_norm: input {a.shape} vs scale {gamma.shape} / shift {beta.shape}")
    shape = a.shape
    x2 = np.ascontiguousarray(a.data).reshape(-1, w)
    gd, bd = gamma.data, beta.data
    y2, mu, rstd = kernels.layer_norm_forward(x2, gd, bd, float(eps))

    def back(g):
        g2 = np.ascontiguousarray(g, dtype=x2.dtype).reshape(-1, w)
        dx, dg, db = kernels.layer_norm_backward(g2, x2, gd, mu, rstd)
        return dx.reshape(shape), dg, db

    return Tensor._result(y2.reshape(shape), (a, gamma, beta), back, "layer_norm")


def l2_normalize(a, axis=-1):
    ax = _norm_axis(axis, a.ndim)
    ad = a.data
    norm = np.sqrt((ad * ad).sum(axis=ax, keepdims=True))
    if not (norm > 0).all():
        raise NonFiniteError("l2_normalize: zero-norm vector")
    out = ad / norm

    def back(g):
        return ((g - out * (g * out).sum(axis=ax, keepdims=True)) / norm,)

    return Tensor._result(out, (a,), back, "l2_normalize")


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "abs": abs,
    "square": square,
    "sqrt": sqrt,
    "matmul": matmul,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "swapaxes": swapaxes,
    "broadcast_to": broadcast_to,
    "concat": concat,
    "getitem": getitem,
    "gather": gather,
    "scatter": scatter,
    "embedding": embedding,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "l2_normalize": l2_normalize,
    "smooth_l1": smooth_l1,
    "stop_gradient": stop_gradient,
}


def primitive_set():
    """Catalog of differentiable primitives, name -> callable."""
    return dict(PRIMITIVES)
