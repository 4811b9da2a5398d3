"""Full ChangeRWKV assembly: shared encoder, STFM and the U-Net style decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import params as P
from ..encoder import EncoderParams, FeaturePyramid, ModelConfig, check_input, encode
from ..numerics import (
    ConfigError,
    DimensionError,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    default_dtype,
    group_norm,
    relu,
    reshape,
    resample2d,
    sigmoid,
)
from ..stfm import StfmParams, stfm

GN_GROUPS = 8


def decoder_widths(cfg: ModelConfig) -> tuple[int, int, int]:
    """Conv width of the decoder levels at 1/8, 1/4 and 1/2 resolution (= skip width)."""
    return cfg.dims[2], cfg.dims[1], cfg.dims[0]


def norm_groups(C: int) -> int:
    return math.gcd(C, GN_GROUPS)


@dataclass
class DecoderLevel:
    conv1: P.ConvParams
    norm1: P.NormParams
    conv2: P.ConvParams
    norm2: P.NormParams


@dataclass
class DecoderParams:
    levels: dict = field(metadata=P.INLINE)
    head: P.ConvParams = None

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "DecoderParams":
        levels = {}
        prev = cfg.dims[3]
        for j, m in zip((3, 2, 1), decoder_widths(cfg)):
            cin = prev + cfg.dims[j - 1]
            levels[f"level{j}"] = DecoderLevel(P.ConvParams.init(cin, m, 3, rng), P.NormParams.init(m),
                                               P.ConvParams.init(m, m, 3, rng), P.NormParams.init(m))
            prev = m
        return cls(levels, P.ConvParams.init(prev, 1, 1, rng))


def _conv_norm_relu(x: Tensor, conv: P.ConvParams, norm: P.NormParams) -> Tensor:
    y = conv2d(x, conv.weight, conv.bias, stride=1, padding=1)
    return relu(group_norm(y, norm_groups(y.shape[1]), norm.weight, norm.bias))


def decode_logits(fused: FeaturePyramid, p: DecoderParams) -> Tensor:
    """Change logits, N x H x W (H, W twice the finest pyramid level)."""
    levels = [as_tensor(f) for f in fused]
    squeeze = levels[0].ndim == 3
    if squeeze:
        levels = [reshape(f, (1,) + f.shape) for f in levels]
    x = levels[3]
    for j in (3, 2, 1):
        skip = levels[j - 1]
        lvl = p.levels[f"level{j}"]
        if lvl.conv1.weight.shape[1] != x.shape[1] + skip.shape[1]:
            raise ConfigError(f"decoder level{j} expects {lvl.conv1.weight.shape[1]} input channels")
        x = resample2d(x, skip.shape[-2:], "bilinear-up")
        x = concat([x, skip], axis=1)
        x = _conv_norm_relu(x, lvl.conv1, lvl.norm1)
        x = _conv_norm_relu(x, lvl.conv2, lvl.norm2)
    H, W = x.shape[-2:]
    x = resample2d(x, (2 * H, 2 * W), "bilinear-up")
    logits = conv2d(x, p.head.weight, p.head.bias)
    N = logits.shape[0]
    logits = reshape(logits, (N, 2 * H, 2 * W))
    return reshape(logits, logits.shape[1:]) if squeeze else logits


def decode(fused: FeaturePyramid, p: DecoderParams) -> Tensor:
    """Change probabilities in (0, 1), N x H x W."""
    return sigmoid(decode_logits(fused, p))


@dataclass
class ChangeRWKVParams:
    encoder: EncoderParams
    stfm: StfmParams
    decoder: DecoderParams

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=None) -> "ChangeRWKVParams":
        rng = np.random.default_rng(seed)
        if dtype is None:
            return cls(EncoderParams.init(cfg, rng), StfmParams.init(cfg, rng), DecoderParams.init(cfg, rng))
        with default_dtype(dtype):
            return cls(EncoderParams.init(cfg, rng), StfmParams.init(cfg, rng), DecoderParams.init(cfg, rng))

    def named(self):
        return P.named_tensors(self)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in P.named_tensors(self)]


def forward_logits(A, B, cfg: ModelConfig, weights: ChangeRWKVParams) -> Tensor:
    A, B = as_tensor(A), as_tensor(B)
    if A.shape != B.shape:
        raise DimensionError(f"image pair differs in shape: {A.shape} vs {B.shape}")
    check_input(A, cfg)
    pyrA = encode(A, cfg, weights.encoder)
    pyrB = encode(B, cfg, weights.encoder)
    return decode_logits(stfm(pyrA, pyrB, weights.stfm, cfg), weights.decoder)


def forward(A, B, cfg: ModelConfig, weights: ChangeRWKVParams) -> Tensor:
    """Change probability map for the pair (A, B); A and B are (N x) 3 x H x W in [0, 1]."""
    return sigmoid(forward_logits(A, B, cfg, weights))
