"""Siamese hierarchical RWKV encoder and the model's analytic size/cost accounting."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import params as P
from .blocks import CHANNEL_MIX_KINDS, MLP_RATIO, BlockParams, rwkv_block, se_hidden
from .numerics import ConfigError, DimensionError, Tensor, as_tensor, conv2d, reshape
from .wkv import OPS_COMBINE, OPS_UPDATE

VARIANTS = {
    "T": ((32, 48, 96, 160), (2, 2, 4, 2)),
    "S": ((32, 64, 128, 192), (3, 3, 6, 3)),
    "B": ((48, 72, 144, 240), (3, 3, 6, 3)),
    # desk-scale configurations used by the training and gradient checks
    "nano": ((8, 12, 24, 40), (1, 1, 2, 1)),
    "pico": ((4, 4, 8, 8), (1, 1, 1, 1)),
}
FUSIONS = ("cross_cbam", "siamdiff", "siamconc")
STRIDE = 16


@dataclass(frozen=True)
class ModelConfig:
    dims: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    in_channels: int = 3
    variant: str = "custom"
    channel_mix: str = "se"
    fusion: str = "cross_cbam"
    spatial_fusion: bool = True

    def __post_init__(self):
        if len(self.dims) != 4 or len(self.depths) != 4:
            raise ConfigError("dims and depths need exactly 4 entries")
        if any(int(d) < 1 for d in self.dims) or any(int(n) < 0 for n in self.depths):
            raise ConfigError(f"bad dims/depths {self.dims} {self.depths}")
        if self.channel_mix not in CHANNEL_MIX_KINDS:
            raise ConfigError(f"channel_mix must be one of {CHANNEL_MIX_KINDS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "depths", tuple(int(n) for n in self.depths))

    @classmethod
    def from_variant(cls, name: str, **overrides) -> "ModelConfig":
        try:
            dims, depths = VARIANTS[name]
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
        return cls(dims=overrides.pop("dims", dims), depths=overrides.pop("depths", depths),
                   variant=name, **overrides)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class FeaturePyramid:
    """Four maps at 1/2, 1/4, 1/8 and 1/16 of the input resolution."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def levels(self) -> list[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]

    def __iter__(self):
        return iter(self.levels())

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [f.shape for f in self.levels()]


@dataclass
class EncoderParams:
    stem: P.ConvParams
    downs: dict = field(metadata=P.INLINE)
    stages: dict = field(metadata=P.INLINE)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "EncoderParams":
        dims = cfg.dims
        stem = P.ConvParams.init(cfg.in_channels, dims[0], 3, rng)
        downs = {f"down{i + 1}": P.ConvParams.init(dims[i], dims[i + 1], 3, rng) for i in range(3)}
        stages = {
            f"stage{i + 1}": {
                f"block{j + 1}": BlockParams.init(dims[i], rng, cfg.channel_mix)
                for j in range(cfg.depths[i])
            }
            for i in range(4)
        }
        return cls(stem, downs, stages)


def check_input(image: Tensor, cfg: ModelConfig | None = None) -> None:
    H, W = image.shape[-2:]
    if H % STRIDE or W % STRIDE or H == 0 or W == 0:
        raise DimensionError(f"H and W must be positive multiples of {STRIDE}, got {H}x{W}")
    if cfg is not None and image.shape[-3] != cfg.in_channels:
        raise DimensionError(f"expected {cfg.in_channels} input channels, got {image.shape[-3]}")


def _check_weights(cfg: ModelConfig, weights: EncoderParams) -> None:
    if weights.stem.weight.shape != (cfg.dims[0], cfg.in_channels, 3, 3):
        raise ConfigError("stem weights do not match the config")
    for i in range(4):
        blocks = weights.stages[f"stage{i + 1}"]
        if len(blocks) != cfg.depths[i]:
            raise ConfigError(f"stage{i + 1} has {len(blocks)} blocks, config says {cfg.depths[i]}")
        for b in blocks.values():
            if b.spatial.W_r.shape[0] != cfg.dims[i]:
                raise ConfigError(f"stage{i + 1} width differs from config")


def encode(image, cfg: ModelConfig, weights: EncoderParams) -> FeaturePyramid:
    """Stride-2 stem, four RWKV stages with stride-2 conv downsampling in between."""
    x = as_tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    check_input(x, cfg)
    _check_weights(cfg, weights)
    x = conv2d(x, weights.stem.weight, weights.stem.bias, stride=2, padding=1)
    feats = []
    for i in range(4):
        if i:
            down = weights.downs[f"down{i}"]
            x = conv2d(x, down.weight, down.bias, stride=2, padding=1)
        for block in weights.stages[f"stage{i + 1}"].values():
            x = rwkv_block(x, block)
        feats.append(reshape(x, x.shape[1:]) if squeeze else x)
    return FeaturePyramid(*feats)


# ---- analytic accounting ---------------------------------------------------

def _block_params(d: int, channel_mix: str) -> int:
    n = 4 * d * d + 3 * d + 2 * d + 2 * d  # projections, mu, (w, u), pre-norm
    if channel_mix == "se":
        h = se_hidden(d)
        n += 2 * d + d * h + h + h * d + d
    elif channel_mix == "mlp":
        n += 2 * d + 2 * MLP_RATIO * d * d
    return n


def _conv_params(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def count_parameters(cfg: ModelConfig, full_model: bool = False) -> int:
    """Exact number of scalar parameters in the encoder (or the whole model)."""
    dims = cfg.dims
    n = _conv_params(cfg.in_channels, dims[0], 3)
    n += sum(_conv_params(dims[i], dims[i + 1], 3) for i in range(3))
    n += sum(cfg.depths[i] * _block_params(dims[i], cfg.channel_mix) for i in range(4))
    if not full_model:
        return n
    from .pipeline.model import decoder_widths
    from .stfm import CBAM_KERNEL, cbam_hidden

    if cfg.spatial_fusion:
        S = sum(dims)
        if cfg.channel_mix == "mlp":
            n += 2 * MLP_RATIO * S * S
        else:
            h = se_hidden(S)
            n += S * h + h + h * S + S
    for d in dims:
        if cfg.fusion == "cross_cbam":
            h = cbam_hidden(d)
            n += d * h + h + h * d + d + _conv_params(2, 1, CBAM_KERNEL)
        elif cfg.fusion == "siamconc":
            n += _conv_params(2 * d, d, 1)
    prev = dims[3]
    for j, m in zip((2, 1, 0), decoder_widths(cfg)):
        n += _conv_params(prev + dims[j], m, 3) + 2 * m + _conv_params(m, m, 3) + 2 * m
        prev = m
    n += _conv_params(prev, 1, 1)
    return n


def count_flops(cfg: ModelConfig, H: int, W: int) -> int:
    """Arithmetic cost of one full forward pass on an image pair of size H x W.

    Convolutions and matmuls count 2 ops per multiply-accumulate; WKV kernels
    count their own ops (41 per token and channel for the bidirectional
    sweep).  Elementwise, normalisation and resampling ops are not counted.
    The instrumented forward pass reports the same number.
    """
    if H % STRIDE or W % STRIDE:
        raise DimensionError(f"H and W must be multiples of {STRIDE}")
    from .pipeline.model import decoder_widths
    from .stfm import CBAM_KERNEL, cbam_hidden

    dims = cfg.dims
    pix = [(H >> (i + 1)) * (W >> (i + 1)) for i in range(4)]
    wkv_per = 2 * OPS_UPDATE + OPS_COMBINE
    enc = 2 * cfg.in_channels * 9 * dims[0] * pix[0]
    for i in range(4):
        d = dims[i]
        if i:
            enc += 2 * dims[i - 1] * d * 9 * pix[i]
        per_block = 2 * 4 * d * d * pix[i] + wkv_per * d * pix[i]
        if cfg.channel_mix == "se":
            per_block += 2 * 2 * d * se_hidden(d)
        elif cfg.channel_mix == "mlp":
            per_block += 2 * 2 * MLP_RATIO * d * d * pix[i]
        enc += cfg.depths[i] * per_block
    total = 2 * enc
    if cfg.spatial_fusion:
        S = sum(dims)
        if cfg.channel_mix == "mlp":
            sfm = 2 * 2 * MLP_RATIO * S * S * pix[0]
        else:
            sfm = 2 * 2 * S * se_hidden(S)
        total += 2 * sfm
    for i, d in enumerate(dims):
        if cfg.fusion == "cross_cbam":
            # two channel-attention MLPs and two 7x7 spatial-attention convs per scale
            total += 2 * (2 * 2 * d * cbam_hidden(d)) + 2 * (2 * 2 * CBAM_KERNEL ** 2 * pix[i])
        elif cfg.fusion == "siamconc":
            total += 2 * 2 * d * d * pix[i]
    prev = dims[3]
    for j, m in zip((2, 1, 0), decoder_widths(cfg)):
        total += 2 * 9 * (prev + dims[j]) * m * pix[j] + 2 * 9 * m * m * pix[j]
        prev = m
    total += 2 * prev * H * W
    return int(total)
