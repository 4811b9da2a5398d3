"""Direct 2-D convolution.

The kernel is applied one tap at a time: every (i, j) offset contributes a
channel matmul against a strided view of the padded input.  No im2col buffer
is materialised, so memory stays at the size of the input and output.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, add_ops, as_tensor, counting, record


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int | str = 0) -> Tensor:
    """Convolve ``x`` (C x H x W or N x C x H x W) with ``kernel`` (O x C x kh x kw).

    ``padding`` is 0 or the "same" amount (k - 1) / 2; the string ``"same"``
    selects the latter.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects (N,)C,H,W input and O,C,kh,kw kernel; got {x.shape}, {kernel.shape}")
    O, Ck, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel sizes must be odd, got {kh}x{kw}")
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == 0:
        ph = pw = 0
    elif kh == kw and padding == (kh - 1) // 2:
        ph = pw = padding
    else:
        raise DimensionError(f"padding must be 0 or (k-1)/2, got {padding}")
    if stride < 1:
        raise DimensionError("stride must be positive")
    xd = x.data[None] if squeeze else x.data
    N, C, H, W = xd.shape
    if C != Ck:
        raise DimensionError(f"input has {C} channels, kernel expects {Ck}")
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}")
    Ho = conv_output_size(H, kh, stride, ph)
    Wo = conv_output_size(W, kw, stride, pw)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    K = kernel.data
    b = None if bias is None else as_tensor(bias)
    if b is not None and b.shape != (O,):
        raise DimensionError(f"bias must have shape ({O},)")

    def tap(i: int, j: int) -> np.ndarray:
        v = xp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
        return v.reshape(N, C, Ho * Wo)

    out = np.zeros((N, O, Ho * Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += K[:, :, i, j] @ tap(i, j)
    out = out.reshape(N, O, Ho, Wo)
    if b is not None:
        out += b.data.reshape(1, O, 1, 1)
    if counting():
        add_ops("conv2d", 2 * N * O * C * kh * kw * Ho * Wo)

    def bw(g):
        g4 = g[None] if squeeze else g
        g3 = g4.reshape(N, O, Ho * Wo)
        gk = np.empty_like(K)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gk[:, :, i, j] = np.tensordot(g3, tap(i, j), axes=([0, 2], [0, 2]))
                gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += (
                    K[:, :, i, j].T @ g3).reshape(N, C, Ho, Wo)
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        grads = [gx, gk]
        if b is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if b is None else (x, kernel, b)
    return record("conv2d", out[0] if squeeze else out, inputs, bw)
