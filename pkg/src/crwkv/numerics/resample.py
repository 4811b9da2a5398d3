"""Integer-factor resampling of the last two axes."""
from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, as_tensor, record

MODES = ("bilinear-up", "avgpool-down", "nearest-up")


def _sl(ndim: int, axis: int, s: slice) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def _phases(s: int) -> list[tuple[int, int, float]]:
    """(phase, offset, frac) for each output phase of an s-fold upsample.

    Output position o = s*j + r samples the source at j + (r + 0.5)/s - 0.5
    (half-pixel centres, i.e. align_corners=False).
    """
    out = []
    for r in range(s):
        pos = (r + 0.5) / s - 0.5
        off = math.floor(pos)
        out.append((r, off, pos - off))
    return out


def _bilinear_axis(x: np.ndarray, s: int, axis: int):
    n = x.shape[axis]
    nd = x.ndim
    xp = np.concatenate([x[_sl(nd, axis, slice(0, 1))], x, x[_sl(nd, axis, slice(n - 1, n))]], axis=axis)
    shape = list(x.shape)
    shape[axis] = n * s
    out = np.empty(shape, dtype=x.dtype)
    phases = _phases(s)
    for r, off, f in phases:
        lo = xp[_sl(nd, axis, slice(1 + off, 1 + off + n))]
        hi = xp[_sl(nd, axis, slice(2 + off, 2 + off + n))]
        out[_sl(nd, axis, slice(r, None, s))] = (1.0 - f) * lo + f * hi

    def bw(g: np.ndarray) -> np.ndarray:
        gshape = list(g.shape)
        gshape[axis] = n + 2
        gp = np.zeros(gshape, dtype=g.dtype)
        for r, off, f in phases:
            gr = g[_sl(nd, axis, slice(r, None, s))]
            gp[_sl(nd, axis, slice(1 + off, 1 + off + n))] += (1.0 - f) * gr
            gp[_sl(nd, axis, slice(2 + off, 2 + off + n))] += f * gr
        gx = gp[_sl(nd, axis, slice(1, n + 1))].copy()
        gx[_sl(nd, axis, slice(0, 1))] += gp[_sl(nd, axis, slice(0, 1))]
        gx[_sl(nd, axis, slice(n - 1, n))] += gp[_sl(nd, axis, slice(n + 1, n + 2))]
        return gx

    return out, bw


def _factor(src: int, dst: int, up: bool) -> int:
    if up:
        if dst < src or dst % src:
            raise DimensionError(f"cannot upsample {src} to {dst} by an integer factor")
        return dst // src
    if dst > src or src % dst:
        raise DimensionError(f"cannot downsample {src} to {dst} by an integer factor")
    return src // dst


def resample2d(x, size: tuple[int, int], mode: str = "bilinear-up") -> Tensor:
    """Resize the trailing H x W axes of ``x`` to ``size``.

    ``bilinear-up`` and ``nearest-up`` need integer upscale factors,
    ``avgpool-down`` an integer downscale factor.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("resample2d needs at least 2 dims")
    if mode not in MODES:
        raise ValueError(f"unknown resample mode {mode!r}")
    H, W = x.shape[-2:]
    Ht, Wt = size
    up = mode != "avgpool-down"
    sh, sw = _factor(H, Ht, up), _factor(W, Wt, up)
    xd = x.data
    nd = xd.ndim
    if mode == "bilinear-up":
        y, bw_h = _bilinear_axis(xd, sh, nd - 2) if sh > 1 else (xd, lambda g: g)
        out, bw_w = _bilinear_axis(y, sw, nd - 1) if sw > 1 else (y, lambda g: g)
        return record("bilinear_up", np.ascontiguousarray(out), (x,), lambda g: (bw_h(bw_w(g)),))
    if mode == "nearest-up":
        out = np.repeat(np.repeat(xd, sh, axis=-2), sw, axis=-1)
        lead = xd.shape[:-2]

        def bw(g):
            return (g.reshape(*lead, H, sh, W, sw).sum(axis=(-3, -1)),)

        return record("nearest_up", out, (x,), bw)
    lead = xd.shape[:-2]
    out = xd.reshape(*lead, Ht, sh, Wt, sw).mean(axis=(-3, -1))

    def bw(g):
        gx = np.broadcast_to(g[..., :, None, :, None] / (sh * sw), (*lead, Ht, sh, Wt, sw))
        return (gx.reshape(xd.shape).copy(),)

    return record("avgpool_down", out, (x,), bw)
