"""Hybrid BCE + Dice objective and pixel-level change-detection metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .numerics import DimensionError, Tensor, ValidationError, as_tensor, clamp, log

DELTA = 1e-7
DICE_EPS = 1.0


def _truth(M, like: Tensor) -> np.ndarray:
    m = np.asarray(M.data if isinstance(M, Tensor) else M)
    if m.shape != like.shape:
        raise DimensionError(f"mask shape {m.shape} != prediction shape {like.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValidationError("ground-truth mask must be binary")
    return m.astype(like.dtype)


def bce_loss(M, M_hat) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [delta, 1 - delta] first."""
    M_hat = as_tensor(M_hat)
    m = Tensor(_truth(M, M_hat))
    p = clamp(M_hat, DELTA, 1.0 - DELTA)
    per_pixel = m * log(p) + (1.0 - m) * log(1.0 - p)
    return -per_pixel.mean()


def dice_loss(M, M_hat, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(M M_hat) + eps) / (sum(M) + sum(M_hat) + eps)."""
    if eps <= 0:
        raise ValidationError("dice eps must be positive")
    M_hat = as_tensor(M_hat)
    m = _truth(M, M_hat)
    inter = (M_hat * Tensor(m)).sum()
    return 1.0 - (2.0 * inter + eps) / (M_hat.sum() + (float(m.sum()) + eps))


def total_loss(M, M_hat, lam: float = 1.0, eps: float = DICE_EPS) -> Tensor:
    if lam < 0:
        raise ValidationError("lambda must be non-negative")
    bce = bce_loss(M, M_hat)
    if lam == 0:
        return bce
    return bce + lam * dice_loss(M, M_hat, eps)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(M, M_hat, threshold: float = 0.5) -> ConfusionCounts:
    """Binarise ``M_hat`` at ``threshold`` (prob >= threshold is change) and tally."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must lie in (0, 1)")
    truth = np.asarray(M.data if isinstance(M, Tensor) else M).astype(bool)
    pred = np.asarray(M_hat.data if isinstance(M_hat, Tensor) else M_hat) >= threshold
    if truth.shape != pred.shape:
        raise DimensionError(f"mask shape {truth.shape} != prediction shape {pred.shape}")
    tp = int(np.count_nonzero(truth & pred))
    fp = int(np.count_nonzero(~truth & pred))
    fn = int(np.count_nonzero(truth & ~pred))
    return ConfusionCounts(tp, fp, fn, truth.size - tp - fp - fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def metrics(c: ConfusionCounts) -> dict[str, float]:
    """Precision, recall, F1 and IoU; an empty denominator yields 0."""
    P = _ratio(c.tp, c.tp + c.fp)
    R = _ratio(c.tp, c.tp + c.fn)
    return {
        "P": P,
        "R": R,
        "F1": _ratio(2 * P * R, P + R),
        "IoU": _ratio(c.tp, c.tp + c.fp + c.fn),
    }


def aggregate(counts: Iterable[ConfusionCounts], per_image: bool = False) -> dict[str, float]:
    """Micro-average (one global confusion matrix) or, with ``per_image``, the mean of per-tile metrics."""
    counts = list(counts)
    if not per_image:
        total = ConfusionCounts()
        for c in counts:
            total = total + c
        return metrics(total)
    if not counts:
        return metrics(ConfusionCounts())
    per = [metrics(c) for c in counts]
    return {k: float(np.mean([m[k] for m in per])) for k in per[0]}
