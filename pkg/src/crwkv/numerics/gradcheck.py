"""Central finite-difference checks against the tape's gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, parameter

DEFAULT_STEP = {np.dtype(np.float32): 4e-3, np.dtype(np.float64): 1e-6}


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(np.ravel(a))), float(np.linalg.norm(np.ravel(b))), floor)
    return num / den


def numeric_grad(loss_fn: Callable[[], float], arr: np.ndarray, h: float,
                 coords: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. ``arr`` (perturbed in place).

    With ``coords`` only those entries are probed; the rest stay zero.
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    it = coords if coords is not None else list(np.ndindex(*arr.shape))
    for idx in it:
        old = arr[idx]
        arr[idx] = old + h
        up = loss_fn()
        arr[idx] = old - h
        down = loss_fn()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float | None = None,
                    seed: int = 0, max_coords: int | None = None) -> list[float]:
    """Relative error between autodiff and central differences for each input.

    ``fn`` maps Tensors to a Tensor of any shape; it is contracted with a fixed
    random projection so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    params = [parameter(np.array(a, copy=True)) for a in arrays]
    dtype = params[0].data.dtype
    step = h if h is not None else DEFAULT_STEP[dtype]
    with Tape():
        out = fn(*params)
        proj = rng.standard_normal(out.shape).astype(dtype)
        loss = (out * Tensor(proj)).sum()
        backward(loss)

    def value() -> float:
        return float((fn(*[Tensor(p.data) for p in params]).data.astype(np.float64) * proj).sum())

    errors = []
    for p in params:
        coords = None
        if max_coords is not None and p.size > max_coords:
            flat = rng.choice(p.size, size=max_coords, replace=False)
            coords = [np.unravel_index(i, p.shape) for i in flat]
        num = numeric_grad(value, p.data, step, coords)
        ana = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        if coords is not None:
            mask = np.zeros(p.shape, dtype=bool)
            for c in coords:
                mask[c] = True
            ana = np.where(mask, ana, 0.0)
        errors.append(rel_error(ana, num))
    return errors
