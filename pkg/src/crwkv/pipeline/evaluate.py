"""Batched prediction and dataset-level scoring."""
from __future__ import annotations

import csv
import io
from typing import Sequence

import numpy as np

from ..encoder import ModelConfig
from ..numerics import no_grad
from ..objective import ConfusionCounts, aggregate, confusion
from .model import ChangeRWKVParams, forward
from .synth import ChangeSample, stack

EVAL_FIELDS = ("dataset", "variant", "threshold", "P", "R", "F1", "IoU")


def predict(A: np.ndarray, B: np.ndarray, cfg: ModelConfig, weights: ChangeRWKVParams,
            batch_size: int = 8) -> np.ndarray:
    """Probability maps for batched pairs N x 3 x H x W, computed without a tape."""
    out = []
    with no_grad():
        for i in range(0, len(A), batch_size):
            out.append(forward(A[i:i + batch_size], B[i:i + batch_size], cfg, weights).data)
    return np.concatenate(out) if out else np.zeros((0,) + A.shape[2:], dtype=A.dtype)


def evaluate(samples: Sequence[ChangeSample], cfg: ModelConfig, weights: ChangeRWKVParams,
             threshold: float = 0.5, batch_size: int = 8, per_image: bool = False) -> dict[str, float]:
    if not samples:
        return aggregate([])
    A, B, M = stack(list(samples))
    probs = predict(A, B, cfg, weights, batch_size)
    counts = [confusion(m, p, threshold) for m, p in zip(M, probs)]
    return aggregate(counts, per_image=per_image)


def total_counts(truths, probs, threshold: float = 0.5) -> ConfusionCounts:
    total = ConfusionCounts()
    for m, p in zip(truths, probs):
        total = total + confusion(m, p, threshold)
    return total


def metrics_csv(rows: list[dict]) -> str:
    """CSV with metrics as percentages to 4 decimals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_FIELDS)
    for r in rows:
        w.writerow([r["dataset"], r["variant"], f"{r['threshold']:g}"]
                   + [f"{100 * r[k]:.4f}" for k in ("P", "R", "F1", "IoU")])
    return buf.getvalue()
