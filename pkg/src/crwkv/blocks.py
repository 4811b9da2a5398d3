"""The RWKV vision block: Q-Shift, bidirectional spatial mixing and channel mixing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import params as P
from .numerics import (
    DimensionError,
    Tensor,
    as_tensor,
    clamp,
    layer_norm,
    matmul,
    record,
    relu,
    reshape,
    sigmoid,
    square,
    transpose,
)
from .wkv import WkvParams, wkv

SE_RATIO = 4
SE_MIN_HIDDEN = 8
MLP_RATIO = 4
CHANNEL_MIX_KINDS = ("se", "mlp", "none")


def _quarters(C: int) -> list[tuple[int, int]]:
    q = C // 4
    return [(0, q), (q, 2 * q), (2 * q, 3 * q), (3 * q, C)]


def qshift(x) -> Tensor:
    """Shift channel quarters one pixel: from the left, right, above and below neighbours.

    Works on C x H x W or N x C x H x W; borders are zero-padded.  The last
    quarter absorbs any channels left over when C is not a multiple of 4.
    """
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"qshift expects (N,)C,H,W, got {x.shape}")
    H, W = x.shape[-2:]
    if H == 0 or W == 0:
        raise DimensionError("qshift on an empty spatial map")
    (a0, a1), (b0, b1), (c0, c1), (d0, d1) = _quarters(x.shape[-3])
    xd = x.data
    out = np.zeros_like(xd)
    out[..., a0:a1, :, 1:] = xd[..., a0:a1, :, :-1]
    out[..., b0:b1, :, :-1] = xd[..., b0:b1, :, 1:]
    out[..., c0:c1, 1:, :] = xd[..., c0:c1, :-1, :]
    out[..., d0:d1, :-1, :] = xd[..., d0:d1, 1:, :]

    def bw(g):
        gx = np.zeros_like(g)
        gx[..., a0:a1, :, :-1] = g[..., a0:a1, :, 1:]
        gx[..., b0:b1, :, 1:] = g[..., b0:b1, :, :-1]
        gx[..., c0:c1, :-1, :] = g[..., c0:c1, 1:, :]
        gx[..., d0:d1, 1:, :] = g[..., d0:d1, :-1, :]
        return (gx,)

    return record("qshift", out, (x,), bw)


@dataclass
class SpatialMixParams:
    W_r: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    mu_r: Tensor
    mu_k: Tensor
    mu_v: Tensor
    wkv: WkvParams
    ln_weight: Tensor
    ln_bias: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "SpatialMixParams":
        ramp = np.arange(d, dtype=np.float64)
        return cls(
            W_r=P.uniform(rng, (d, d), d),
            W_k=P.uniform(rng, (d, d), d),
            W_v=P.uniform(rng, (d, d), d),
            W_o=P.uniform(rng, (d, d), d),
            mu_r=P.full((d,), 0.5),
            mu_k=P.full((d,), 0.5),
            mu_v=P.full((d,), 0.5),
            wkv=WkvParams(
                w_raw=P.parameter_from(np.log(np.log(2.0) * (ramp + 1.0))),
                u=P.zeros((d,)),
            ),
            ln_weight=P.ones((d,)),
            ln_bias=P.zeros((d,)),
        )


def se_hidden(d: int, ratio: int = SE_RATIO) -> int:
    return max(math.ceil(d / ratio), SE_MIN_HIDDEN)


@dataclass
class SeParams:
    reduce: Tensor
    reduce_bias: Tensor
    expand: Tensor
    expand_bias: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, ratio: int = SE_RATIO) -> "SeParams":
        h = se_hidden(d, ratio)
        return cls(P.uniform(rng, (d, h), d), P.zeros((h,)), P.uniform(rng, (h, d), h), P.zeros((d,)))


@dataclass
class MlpMixParams:
    W1: Tensor
    W2: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "MlpMixParams":
        return cls(P.uniform(rng, (d, MLP_RATIO * d), d), P.uniform(rng, (MLP_RATIO * d, d), MLP_RATIO * d))


@dataclass
class ChannelParams:
    ln_weight: Tensor | None = None
    ln_bias: Tensor | None = None
    se: SeParams | None = None
    mlp: MlpMixParams | None = None


@dataclass
class BlockParams:
    spatial: SpatialMixParams
    channel: ChannelParams

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, channel_mix: str = "se") -> "BlockParams":
        if channel_mix not in CHANNEL_MIX_KINDS:
            raise DimensionError(f"unknown channel mixing {channel_mix!r}")
        spatial = SpatialMixParams.init(d, rng)
        channel = ChannelParams()
        if channel_mix != "none":
            channel.ln_weight, channel.ln_bias = P.ones((d,)), P.zeros((d,))
        if channel_mix == "se":
            channel.se = SeParams.init(d, rng)
        elif channel_mix == "mlp":
            channel.mlp = MlpMixParams.init(d, rng)
        return cls(spatial, channel)


def _check_dim(W: Tensor, d: int, what: str) -> None:
    if W.shape[0] != d:
        raise DimensionError(f"{what}: parameter expects width {W.shape[0]}, input has {d}")


def spatial_mix(x, shifted, p: SpatialMixParams) -> Tensor:
    """Token-shift interpolation, r/k/v projections, bidirectional WKV, receptance gate.

    ``x`` and ``shifted`` are (B x) N x d row-major token sequences.
    """
    x, shifted = as_tensor(x), as_tensor(shifted)
    if x.shape != shifted.shape:
        raise DimensionError(f"x {x.shape} and shifted {shifted.shape} differ")
    d = x.shape[-1]
    _check_dim(p.W_r, d, "spatial_mix")

    def mix(mu: Tensor) -> Tensor:
        m = clamp(mu, 0.0, 1.0)
        return m * x + (1.0 - m) * shifted

    r = matmul(mix(p.mu_r), transpose(p.W_r))
    k = matmul(mix(p.mu_k), transpose(p.W_k))
    v = matmul(mix(p.mu_v), transpose(p.W_v))
    agg = wkv(k, v, p.wkv.decay(), p.wkv.u, bidirectional=True)
    return matmul(sigmoid(r) * agg, transpose(p.W_o))


def channel_mix_se(x, p: SeParams) -> Tensor:
    """Squeeze-and-excitation gating of a (N x) C x H x W map."""
    x = as_tensor(x)
    C = x.shape[-3]
    _check_dim(p.reduce, C, "channel_mix_se")
    pooled = x.mean(axis=(-2, -1))
    hidden = relu(matmul(reshape(pooled, (-1, C)), p.reduce) + p.reduce_bias)
    gate = sigmoid(matmul(hidden, p.expand) + p.expand_bias)
    return x * reshape(gate, pooled.shape + (1, 1))


def channel_mix_mlp(x, p: MlpMixParams) -> Tensor:
    """Squared-ReLU two-layer MLP applied per token on a (B x) N x d sequence."""
    x = as_tensor(x)
    _check_dim(p.W1, x.shape[-1], "channel_mix_mlp")
    return matmul(square(relu(matmul(x, p.W1))), p.W2)


def to_tokens(x: Tensor) -> Tensor:
    """N x C x H x W map -> N x (H W) x C row-major token sequence."""
    N, C, H, W = x.shape
    return transpose(reshape(x, (N, C, H * W)), (0, 2, 1))


def from_tokens(t: Tensor, H: int, W: int) -> Tensor:
    N, T, C = t.shape
    return reshape(transpose(t, (0, 2, 1)), (N, C, H, W))


def rwkv_block(x, p: BlockParams) -> Tensor:
    """Pre-norm residual block: x + SpatialMix(LN(x)), then + ChannelMix(LN(.))."""
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    _, C, H, W = x.shape
    _check_dim(p.spatial.ln_weight, C, "rwkv_block")
    h = layer_norm(x, p.spatial.ln_weight, p.spatial.ln_bias, axis=1)
    mixed = spatial_mix(to_tokens(h), to_tokens(qshift(h)), p.spatial)
    x = x + from_tokens(mixed, H, W)
    ch = p.channel
    if ch.se is not None or ch.mlp is not None:
        h = layer_norm(x, ch.ln_weight, ch.ln_bias, axis=1)
        if ch.se is not None:
            x = x + channel_mix_se(h, ch.se)
        else:
            x = x + from_tokens(channel_mix_mlp(to_tokens(h), ch.mlp), H, W)
    return reshape(x, x.shape[1:]) if squeeze else x
