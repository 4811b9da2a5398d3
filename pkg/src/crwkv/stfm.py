"""Spatial-temporal fusion: cross-scale spatial fusion, then Cross-CBAM temporal fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import params as P
from .blocks import MlpMixParams, SeParams, channel_mix_mlp, channel_mix_se, from_tokens, to_tokens
from .encoder import FeaturePyramid, ModelConfig
from .numerics import (
    DimensionError,
    Tensor,
    absolute,
    as_tensor,
    concat,
    conv2d,
    matmul,
    reduce,
    relu,
    reshape,
    resample2d,
    sigmoid,
    split,
)

CBAM_RATIO = 4
CBAM_MIN_HIDDEN = 8
CBAM_KERNEL = 7

FusedPyramid = FeaturePyramid


def cbam_hidden(C: int) -> int:
    return max(math.ceil(C / CBAM_RATIO), CBAM_MIN_HIDDEN)


@dataclass
class CbamParams:
    """Channel-attention MLP and 7x7 spatial-attention conv for one scale.

    Both temporal branches use the same weights.
    """

    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    conv: P.ConvParams

    @classmethod
    def init(cls, C: int, rng: np.random.Generator) -> "CbamParams":
        h = cbam_hidden(C)
        return cls(P.uniform(rng, (C, h), C), P.zeros((h,)), P.uniform(rng, (h, C), h), P.zeros((C,)),
                   P.ConvParams.init(2, 1, CBAM_KERNEL, rng))


@dataclass
class StfmParams:
    sfm: SeParams | MlpMixParams | None
    scales: dict = field(metadata=P.INLINE)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "StfmParams":
        sfm = None
        if cfg.spatial_fusion:
            S = sum(cfg.dims)
            sfm = MlpMixParams.init(S, rng) if cfg.channel_mix == "mlp" else SeParams.init(S, rng)
        scales = {}
        for i, d in enumerate(cfg.dims):
            if cfg.fusion == "cross_cbam":
                scales[f"scale{i + 1}"] = CbamParams.init(d, rng)
            elif cfg.fusion == "siamconc":
                scales[f"scale{i + 1}"] = P.ConvParams.init(2 * d, d, 1, rng)
        return cls(sfm, scales)


def _batched(t: Tensor) -> tuple[Tensor, bool]:
    t = as_tensor(t)
    if t.ndim == 3:
        return reshape(t, (1,) + t.shape), True
    return t, False


def spatial_fuse(pyr: FeaturePyramid, sfm: SeParams | MlpMixParams) -> FeaturePyramid:
    """Upsample every level to the finest one, concatenate, refine residually, split back."""
    levels = [_batched(f) for f in pyr]
    squeeze = levels[0][1]
    levels = [f for f, _ in levels]
    H1, W1 = levels[0].shape[-2:]
    widths = [f.shape[1] for f in levels]
    up = [levels[0]] + [resample2d(f, (H1, W1), "bilinear-up") for f in levels[1:]]
    F = concat(up, axis=1)
    S = F.shape[1]
    if isinstance(sfm, SeParams):
        if sfm.reduce.shape[0] != S:
            raise DimensionError(f"spatial fusion expects {sfm.reduce.shape[0]} channels, got {S}")
        F = F + channel_mix_se(F, sfm)
    else:
        if sfm.W1.shape[0] != S:
            raise DimensionError(f"spatial fusion expects {sfm.W1.shape[0]} channels, got {S}")
        F = F + from_tokens(channel_mix_mlp(to_tokens(F), sfm), H1, W1)
    parts = split(F, widths, axis=1)
    out = [parts[0]]
    for part, f in zip(parts[1:], levels[1:]):
        out.append(resample2d(part, f.shape[-2:], "avgpool-down"))
    if squeeze:
        out = [reshape(o, o.shape[1:]) for o in out]
    return FeaturePyramid(*out)


def channel_attention(f, p: CbamParams) -> Tensor:
    """sigmoid(MLP(GAP(f))): one weight in (0, 1) per channel; shape (N x) C."""
    f = as_tensor(f)
    C = f.shape[-3]
    if p.mlp_w1.shape[0] != C:
        raise DimensionError(f"channel attention expects {p.mlp_w1.shape[0]} channels, got {C}")
    pooled = f.mean(axis=(-2, -1))
    flat = reshape(pooled, (-1, C))
    hidden = relu(matmul(flat, p.mlp_w1) + p.mlp_b1)
    return reshape(sigmoid(matmul(hidden, p.mlp_w2) + p.mlp_b2), pooled.shape)


def spatial_attention(f, p: CbamParams) -> Tensor:
    """sigmoid(Conv7x7([mean_c f; max_c f])): shape (N x) 1 x h x w."""
    f = as_tensor(f)
    if p.conv.weight.shape[1] != 2:
        raise DimensionError("spatial attention conv must take 2 input channels")
    ax = f.ndim - 3
    stacked = concat([reduce("mean", f, ax, keepdims=True), reduce("max", f, ax, keepdims=True)], axis=ax)
    return sigmoid(conv2d(stacked, p.conv.weight, p.conv.bias, stride=1, padding="same"))


def _gate(gamma: Tensor, f: Tensor) -> Tensor:
    return f * reshape(gamma, gamma.shape + (1, 1))


def temporal_fuse(fA, fB, p: CbamParams) -> Tensor:
    """Cross-CBAM: each branch's channel and spatial attention re-weights the other branch."""
    fA, fB = as_tensor(fA), as_tensor(fB)
    if fA.shape != fB.shape:
        raise DimensionError(f"temporal features differ in shape: {fA.shape} vs {fB.shape}")
    fA2 = _gate(channel_attention(fB, p), fA)
    fB2 = _gate(channel_attention(fA, p), fB)
    sA = spatial_attention(fA2, p)
    sB = spatial_attention(fB2, p)
    return fA2 * sB + fB2 * sA


def fuse_siamdiff(fA, fB) -> Tensor:
    fA, fB = as_tensor(fA), as_tensor(fB)
    if fA.shape != fB.shape:
        raise DimensionError(f"temporal features differ in shape: {fA.shape} vs {fB.shape}")
    return absolute(fA - fB)


def fuse_siamconc(fA, fB, proj: P.ConvParams) -> Tensor:
    """Channel concatenation followed by a 1x1 conv back to C channels."""
    fA, fB = as_tensor(fA), as_tensor(fB)
    if fA.shape != fB.shape:
        raise DimensionError(f"temporal features differ in shape: {fA.shape} vs {fB.shape}")
    ax = fA.ndim - 3
    return conv2d(concat([fA, fB], axis=ax), proj.weight, proj.bias)


def stfm(pyrA: FeaturePyramid, pyrB: FeaturePyramid, p: StfmParams, cfg: ModelConfig) -> FeaturePyramid:
    """Spatial fusion of each temporal pyramid (when enabled), then per-scale temporal fusion."""
    if cfg.spatial_fusion:
        pyrA = spatial_fuse(pyrA, p.sfm)
        pyrB = spatial_fuse(pyrB, p.sfm)
    fused = []
    for i, (a, b) in enumerate(zip(pyrA, pyrB)):
        if cfg.fusion == "cross_cbam":
            fused.append(temporal_fuse(a, b, p.scales[f"scale{i + 1}"]))
        elif cfg.fusion == "siamdiff":
            fused.append(fuse_siamdiff(a, b))
        else:
            fused.append(fuse_siamconc(a, b, p.scales[f"scale{i + 1}"]))
    return FeaturePyramid(*fused)
