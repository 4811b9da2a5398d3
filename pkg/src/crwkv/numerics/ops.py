"""Differentiable primitives over :class:`~crwkv.numerics.tensor.Tensor`."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericError
from .tensor import Tensor, add_ops, as_tensor, counting, record


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` (inverse of trailing-dim broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcastable") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("division by zero")
    out = ad / bd

    def bw(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return record("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of a non-positive value")
    return record("log", np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return record("square", x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def maximum(a, c: float) -> Tensor:
    """max(a, c) against a constant; gradient flows where a > c."""
    a = as_tensor(a)
    mask = a.data > c
    return record("maximum", np.where(mask, a.data, a.dtype.type(c)), (a,), lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the boundary itself still passes gradient."""
    a = as_tensor(a)
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return record("clamp", np.clip(x, lo, hi), (a,), lambda g: (g * mask,))


_UNARY = {
    "neg": neg, "exp": exp, "ln": log, "log": log, "sigmoid": sigmoid, "relu": relu,
    "square": square, "sqrt": sqrt, "abs": absolute,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None, **kw) -> Tensor:
    """Dispatch an elementwise op by name (``max`` and ``clamp`` take constants)."""
    if kind in _BINARY:
        if b is None:
            raise DimensionError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in ("max", "maximum"):
        return maximum(a, kw.get("c", b))
    if kind == "clamp":
        return clamp(a, kw["lo"], kw["hi"])
    raise ValueError(f"unknown elementwise op {kind!r}")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data
    out = ad @ bd
    if counting():
        add_ops("matmul", 2 * out.size * ad.shape[-1])

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return record("matmul", out, (a, b), bw)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, t, axis=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max over ``axis`` (None = all)."""
    t = as_tensor(t)
    axes = _norm_axes(axis, t.ndim)
    x = t.data
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),)
    elif kind == "mean":
        count = int(np.prod([shape[i] for i in axes])) if axes else 1
        out = x.mean(axis=axes, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(g.reshape(kept) / count, shape).copy(),)
    elif kind == "max":
        full = x.max(axis=axes, keepdims=True)
        out = full if keepdims else full.reshape([n for i, n in enumerate(shape) if i not in axes])
        hit = x == full
        # ties share the gradient equally
        share = hit / hit.sum(axis=axes, keepdims=True)
        bw = lambda g: (g.reshape(kept) * share,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return record(kind, np.asarray(out, dtype=x.dtype), (t,), bw)


def reshape(t, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return record("reshape", out, (t,), lambda g: (g.reshape(old),))


def transpose(t, axes: Sequence[int] | None = None) -> Tensor:
    t = as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(t.data.transpose(axes))
    return record("transpose", out, (t,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"cannot concatenate {ref.shape} with {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
        return grads

    return record("concat", out, tuple(tensors), bw)


def getitem(t, index) -> Tensor:
    """Basic (slice/int) indexing; fancy indexing is rejected."""
    t = as_tensor(t)
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not (isinstance(i, (int, slice)) or i is Ellipsis or i is None):
            raise DimensionError("only basic slicing is supported")
    shape, dtype = t.shape, t.dtype
    out = np.ascontiguousarray(t.data[index])

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return record("getitem", out, (t,), bw)


def split(t, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    t = as_tensor(t)
    ax = axis % t.ndim
    if sum(sizes) != t.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to {t.shape[ax]}")
    parts = []
    lo = 0
    for n in sizes:
        idx = [slice(None)] * t.ndim
        idx[ax] = slice(lo, lo + n)
        parts.append(getitem(t, tuple(idx)))
        lo += n
    return parts


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g - gm - xhat * gxm)


def layer_norm(x, weight, bias, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalise over one axis (the channel axis) at every other position."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    ax = axis % x.ndim
    C = x.shape[ax]
    if weight.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"layer_norm affine params must have shape ({C},)")
    bshape = [1] * x.ndim
    bshape[ax] = C
    xd = x.data
    mu = xd.mean(axis=ax, keepdims=True)
    var = xd.var(axis=ax, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    wv = weight.data.reshape(bshape)
    out = xhat * wv + bias.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        gx = _normalize_backward(g * wv, xhat, inv_std, ax)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer_norm", out, (x, weight, bias), bw)


def group_norm(x, groups: int, weight, bias, eps: float = 1e-5) -> Tensor:
    """Group normalisation for N x C x H x W maps."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4:
        raise DimensionError("group_norm expects N x C x H x W")
    N, C, H, W = x.shape
    if C % groups:
        raise DimensionError(f"{C} channels cannot be split into {groups} groups")
    if weight.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"group_norm affine params must have shape ({C},)")
    xg = x.data.reshape(N, groups, C // groups, H, W)
    axes = (2, 3, 4)
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(N, C, H, W)
    wv = weight.data.reshape(1, C, 1, 1)
    out = xhat * wv + bias.data.reshape(1, C, 1, 1)

    def bw(g):
        gh = (g * wv).reshape(N, groups, C // groups, H, W)
        gx = _normalize_backward(gh, xhat.reshape(xg.shape), inv_std, axes)
        return gx.reshape(N, C, H, W), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record("group_norm", out, (x, weight, bias), bw)
