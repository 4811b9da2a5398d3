"""Synthetic bi-temporal "building" scenes with exact change masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..encoder import STRIDE
from ..numerics import DimensionError, ValidationError


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "ellipse"
    cy: float
    cx: float
    hy: float  # half extents
    hx: float
    color: tuple[float, float, float]

    def raster(self, H: int, W: int) -> np.ndarray:
        yy = np.arange(H)[:, None] + 0.5
        xx = np.arange(W)[None, :] + 0.5
        dy = (yy - self.cy) / self.hy
        dx = (xx - self.cx) / self.hx
        if self.kind == "rect":
            return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
        return dy * dy + dx * dx <= 1.0


@dataclass
class ChangeSample:
    A: np.ndarray  # 3 x H x W float32 in [0, 1]
    B: np.ndarray
    M: np.ndarray  # H x W uint8 in {0, 1}
    seed: int
    index: int

    @property
    def provenance(self) -> str:
        return f"synth:{self.seed}:{self.index}"


@dataclass(frozen=True)
class Difficulty:
    noise: float
    jitter: float
    shapes: tuple[int, int]
    changes: tuple[int, int]
    texture: float


def difficulty_profile(level: int) -> Difficulty:
    if level < 0:
        raise ValidationError("difficulty must be >= 0")
    return Difficulty(
        noise=0.02 * level,
        jitter=0.05 * level,
        shapes=(2 + level, 4 + 2 * level),
        changes=(1, 2 + level),
        texture=0.08 + 0.04 * level,
    )


def background(rng: np.random.Generator, H: int, W: int, texture: float) -> np.ndarray:
    """Smooth coloured terrain: a base colour plus a few low-frequency waves."""
    base = rng.uniform(0.25, 0.45, size=3)
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    field = np.zeros((H, W))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        field += np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    field *= texture / 3
    tint = rng.uniform(0.5, 1.0, size=3)
    return np.clip(base[:, None, None] + tint[:, None, None] * field, 0.0, 1.0)


def _random_shape(rng: np.random.Generator, H: int, W: int) -> Shape:
    lo, hi = max(2.0, min(H, W) / 16), max(3.0, min(H, W) / 6)
    hy, hx = rng.uniform(lo, hi, size=2)
    cy = rng.uniform(hy, H - hy)
    cx = rng.uniform(hx, W - hx)
    # roofs are brighter than the terrain so every shape has contrast
    color = tuple(float(c) for c in rng.uniform(0.65, 1.0, size=3))
    return Shape("rect" if rng.random() < 0.6 else "ellipse", cy, cx, hy, hx, color)


def place_shapes(rng: np.random.Generator, H: int, W: int, n: int, tries: int = 50) -> list[Shape]:
    """Up to ``n`` non-overlapping shapes (1-pixel gap), by rejection sampling."""
    occupied = np.zeros((H, W), dtype=bool)
    shapes: list[Shape] = []
    for _ in range(n * tries):
        if len(shapes) == n:
            break
        s = _random_shape(rng, H, W)
        r = s.raster(H, W)
        if not r.any():
            continue
        grown = r.copy()
        grown[1:] |= r[:-1]
        grown[:-1] |= r[1:]
        grown[:, 1:] |= grown[:, :-1].copy()
        grown[:, :-1] |= grown[:, 1:].copy()
        if (grown & occupied).any():
            continue
        occupied |= r
        shapes.append(s)
    return shapes


def paint(bg: np.ndarray, shapes: list[Shape]) -> tuple[np.ndarray, np.ndarray]:
    """Draw shapes over a background; returns the image and the union raster."""
    img = bg.copy()
    H, W = bg.shape[1:]
    union = np.zeros((H, W), dtype=bool)
    for s in shapes:
        r = s.raster(H, W)
        img[:, r] = np.asarray(s.color)[:, None]
        union |= r
    return img, union


def render_pair(bg: np.ndarray, shapes_a: list[Shape], shapes_b: list[Shape],
                rng: np.random.Generator | None = None, noise: float = 0.0, jitter: float = 0.0):
    """Images A, B and the mask of the symmetric difference of the two shape sets."""
    A, ua = paint(bg, shapes_a)
    B, ub = paint(bg, shapes_b)
    M = ua ^ ub
    if rng is not None and jitter > 0:
        gain = 1.0 + rng.uniform(-jitter, jitter, size=(3, 1, 1))
        B = B * gain + rng.uniform(-jitter, jitter, size=(3, 1, 1)) / 2
    if rng is not None and noise > 0:
        A = A + rng.normal(0.0, noise, size=A.shape)
        B = B + rng.normal(0.0, noise, size=B.shape)
    A = np.clip(A, 0.0, 1.0).astype(np.float32)
    B = np.clip(B, 0.0, 1.0).astype(np.float32)
    return A, B, M.astype(np.uint8)


def _one(rng: np.random.Generator, H: int, W: int, prof: Difficulty, changes: int | None):
    bg = background(rng, H, W, prof.texture)
    n_changes = int(rng.integers(prof.changes[0], prof.changes[1] + 1)) if changes is None else changes
    n_shared = int(rng.integers(prof.shapes[0], prof.shapes[1] + 1))
    pool = place_shapes(rng, H, W, n_shared + n_changes)
    n_changes = min(n_changes, len(pool))
    shared, changed = pool[: len(pool) - n_changes], pool[len(pool) - n_changes:]
    in_a = rng.random(len(changed)) < 0.5  # removal (in A only) or addition (in B only)
    shapes_a = shared + [s for s, a in zip(changed, in_a) if a]
    shapes_b = shared + [s for s, a in zip(changed, in_a) if not a]
    return render_pair(bg, shapes_a, shapes_b, rng, prof.noise, prof.jitter)


def synth_generate(n: int, H: int, W: int, difficulty: int = 1, seed: int = 0,
                   changes: int | None = None) -> list[ChangeSample]:
    """Deterministic list of ``n`` samples; ``changes`` pins the number of changed shapes."""
    if H % STRIDE or W % STRIDE or H <= 0 or W <= 0:
        raise DimensionError(f"H and W must be positive multiples of {STRIDE}")
    if n < 0:
        raise ValidationError("n must be non-negative")
    prof = difficulty_profile(difficulty)
    streams = np.random.SeedSequence(seed).spawn(n)
    out = []
    for i, ss in enumerate(streams):
        A, B, M = _one(np.random.default_rng(ss), H, W, prof, changes)
        out.append(ChangeSample(A, B, M, seed, i))
    return out


def stack(samples: list[ChangeSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays N x 3 x H x W (A, B) and N x H x W (M, float)."""
    A = np.stack([s.A for s in samples])
    B = np.stack([s.B for s in samples])
    M = np.stack([s.M for s in samples]).astype(A.dtype)
    return A, B, M
