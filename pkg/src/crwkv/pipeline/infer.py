"""Sliding-window inference over arbitrarily sized image pairs."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..encoder import STRIDE, ModelConfig
from ..numerics import DimensionError, ValidationError, no_grad
from ..objective import confusion, metrics
from .checkpoint import load_checkpoint
from .imageio import read_mask, read_rgb, write_mask
from .model import ChangeRWKVParams, forward

# overlay palette (RGB)
TP_COLOR = (255, 255, 255)
TN_COLOR = (0, 0, 0)
FP_COLOR = (0, 255, 0)
FN_COLOR = (255, 0, 0)


def tile_starts(length: int, tile: int) -> list[int]:
    """Window offsets at stride tile/2; the last window is flush with the far edge."""
    if length <= tile:
        return [0]
    step = tile // 2
    starts = list(range(0, length - tile + 1, step))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def infer_probs(A: np.ndarray, B: np.ndarray, cfg: ModelConfig, weights: ChangeRWKVParams,
                tile: int = 256, batch_size: int = 4) -> np.ndarray:
    """H x W change probabilities; overlapping windows average their probabilities.

    Inputs smaller than a tile are zero-padded to one tile and cropped back.
    """
    if tile <= 0 or tile % STRIDE:
        raise ValidationError(f"tile must be a positive multiple of {STRIDE}")
    if A.shape != B.shape or A.ndim != 3:
        raise DimensionError(f"image pair must be two 3 x H x W arrays of one size, got {A.shape}, {B.shape}")
    C, H, W = A.shape
    Hp, Wp = max(H, tile), max(W, tile)
    if (Hp, Wp) != (H, W):
        pad = ((0, 0), (0, Hp - H), (0, Wp - W))
        A, B = np.pad(A, pad), np.pad(B, pad)
    acc = np.zeros((Hp, Wp), dtype=np.float64)
    hits = np.zeros((Hp, Wp), dtype=np.int32)
    windows = [(y, x) for y in tile_starts(Hp, tile) for x in tile_starts(Wp, tile)]
    with no_grad():
        for i in range(0, len(windows), batch_size):
            chunk = windows[i:i + batch_size]
            a = np.stack([A[:, y:y + tile, x:x + tile] for y, x in chunk])
            b = np.stack([B[:, y:y + tile, x:x + tile] for y, x in chunk])
            probs = forward(a, b, cfg, weights).data
            for (y, x), p in zip(chunk, probs):
                acc[y:y + tile, x:x + tile] += p
                hits[y:y + tile, x:x + tile] += 1
    out = acc / hits
    return out[:H, :W].astype(A.dtype)


def overlay(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8: TP white, TN black, FP green, FN red."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    img = np.zeros(pred.shape + (3,), dtype=np.uint8)
    img[pred & truth] = TP_COLOR
    img[~pred & ~truth] = TN_COLOR
    img[pred & ~truth] = FP_COLOR
    img[~pred & truth] = FN_COLOR
    return img


@dataclass
class InferResult:
    mask_path: Path
    overlay_path: Path | None
    probs: np.ndarray
    metrics: dict | None


def infer_files(a_path, b_path, ckpt, out_path, tile: int = 256, threshold: float = 0.5,
                overlay_path=None, truth_path=None) -> InferResult:
    from PIL import Image

    A, B = read_rgb(a_path), read_rgb(b_path)
    if A.shape != B.shape:
        raise DimensionError(f"{a_path} and {b_path} differ in size: {A.shape[1:]} vs {B.shape[1:]}")
    cfg, weights, _ = load_checkpoint(ckpt)
    probs = infer_probs(A, B, cfg, weights, tile)
    pred = probs >= threshold
    out_path = Path(out_path)
    write_mask(out_path, pred)
    scores = None
    if overlay_path is not None:
        if truth_path is None:
            raise ValidationError("--overlay needs a ground-truth mask (--truth)")
        truth = read_mask(truth_path)
        Image.fromarray(overlay(pred, truth), "RGB").save(overlay_path)
        scores = metrics(confusion(truth, probs, threshold))
        overlay_path = Path(overlay_path)
    elif truth_path is not None:
        scores = metrics(confusion(read_mask(truth_path), probs, threshold))
    return InferResult(out_path, overlay_path, probs, scores)
