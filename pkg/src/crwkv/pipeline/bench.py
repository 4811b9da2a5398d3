"""Scaling benchmarks: counted ops, wall time and peak tensor bytes versus size."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass

import numpy as np

from ..encoder import ModelConfig
from ..numerics import Tensor, ValidationError, count_ops, memory, no_grad
from ..wkv import kernel_ops
from .model import ChangeRWKVParams, forward

KERNEL_TARGETS = ("wkv-recurrent", "wkv-bidirectional", "wkv-naive", "wkv-bidirectional-naive")
MODEL_TARGET = "full-model"
TARGETS = KERNEL_TARGETS + (MODEL_TARGET,)
DEFAULT_KERNEL_SIZES = tuple(2 ** e for e in range(6, 21))
DEFAULT_MODEL_SIZES = (64, 128, 256, 512, 1024)
KERNEL_FIELDS = ("kernel", "T", "d", "ops", "wall_ns", "peak_bytes", "status")
MODEL_FIELDS = ("model", "H", "W", "ops", "wall_ns", "peak_bytes", "status")


@dataclass(frozen=True)
class BenchRecord:
    name: str
    size: int  # T for kernels, side length for the model
    d: int
    ops: int | None
    wall_ns: int | None
    peak_bytes: int | None
    status: str = "ok"

    @property
    def truncated(self) -> bool:
        return self.status != "ok"


def _check_sizes(sizes) -> list[int]:
    sizes = [int(s) for s in sizes]
    if not sizes or any(s <= 0 for s in sizes) or sizes != sorted(sizes):
        raise ValidationError("sizes must be positive and ascending")
    return sizes


def _timed(fn, repeats: int) -> tuple[object, int]:
    walls, out = [], None
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter_ns()
        out = fn()
        walls.append(time.perf_counter_ns() - t0)
    return out, int(statistics.median(walls))


def bench_kernel(name: str, sizes=DEFAULT_KERNEL_SIZES, d: int = 8, repeats: int = 3,
                 seed: int = 0, budget_s: float = 10.0) -> list[BenchRecord]:
    """Sweep sequence length T at fixed width ``d``.

    A size whose run is predicted to exceed ``budget_s`` (from the previous
    size and the kernel's growth order) or that runs out of memory is
    recorded with status ``truncated`` and the sweep stops.
    """
    if name not in KERNEL_TARGETS:
        raise ValueError(f"unknown kernel {name!r}; choose from {KERNEL_TARGETS}")
    sizes = _check_sizes(sizes)
    order = 2 if "naive" in name else 1
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 1.0, d).astype(np.float32)
    u = rng.uniform(-0.5, 0.5, d).astype(np.float32)
    kernel_ops(name, np.zeros((1, d), np.float32), np.zeros((1, d), np.float32), w, u)  # JIT warm-up
    out: list[BenchRecord] = []
    prev: tuple[int, int] | None = None
    for T in sizes:
        if prev is not None and prev[1] * (T / prev[0]) ** order * max(repeats, 1) > budget_s * 1e9:
            out.append(BenchRecord(name, T, d, None, None, None, "truncated"))
            break
        try:
            memory.reset_peak()
            k = Tensor(rng.standard_normal((T, d)).astype(np.float32))
            v = Tensor(rng.standard_normal((T, d)).astype(np.float32))
            (res, ops), wall = _timed(lambda: kernel_ops(name, k.data, v.data, w, u), repeats)
            y = Tensor(res)
            peak = memory.peak
            del k, v, y, res
        except MemoryError:
            out.append(BenchRecord(name, T, d, None, None, None, "truncated"))
            break
        out.append(BenchRecord(name, T, d, ops, wall, peak))
        prev = (T, wall)
    return out


def model_ops(cfg: ModelConfig, weights: ChangeRWKVParams, size: int, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    A = rng.random((1, cfg.in_channels, size, size), dtype=np.float32)
    B = rng.random((1, cfg.in_channels, size, size), dtype=np.float32)
    with no_grad(), count_ops() as c:
        forward(A, B, cfg, weights)
    return c.ops


def bench_model(cfg: ModelConfig, sizes=DEFAULT_MODEL_SIZES, repeats: int = 3, seed: int = 0,
                budget_s: float = 300.0) -> list[BenchRecord]:
    """Sweep square input resolution for one full forward pass (batch 1)."""
    sizes = _check_sizes(sizes)
    weights = ChangeRWKVParams.init(cfg, seed=seed, dtype=np.float32)
    rng = np.random.default_rng(seed)
    out: list[BenchRecord] = []
    prev: tuple[int, int] | None = None
    name = f"changerwkv-{cfg.variant}"
    for S in sizes:
        if prev is not None and prev[1] * (S / prev[0]) ** 2 * max(repeats, 1) > budget_s * 1e9:
            out.append(BenchRecord(name, S, 0, None, None, None, "truncated"))
            break
        try:
            A = rng.random((1, cfg.in_channels, S, S), dtype=np.float32)
            B = rng.random((1, cfg.in_channels, S, S), dtype=np.float32)
            memory.reset_peak()
            with no_grad(), count_ops() as c:
                forward(A, B, cfg, weights)
            ops, peak = c.ops, memory.peak
            with no_grad():
                _, wall = _timed(lambda: forward(A, B, cfg, weights), repeats)
        except MemoryError:
            out.append(BenchRecord(name, S, 0, None, None, None, "truncated"))
            break
        out.append(BenchRecord(name, S, 0, ops, wall, peak))
        prev = (S, wall)
    return out


def _cell(v) -> str:
    return "" if v is None else str(v)


def to_csv(records: list[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    is_model = bool(records) and records[0].name.startswith("changerwkv")
    w.writerow(MODEL_FIELDS if is_model else KERNEL_FIELDS)
    for r in records:
        lead = [r.name, r.size, r.size] if is_model else [r.name, r.size, r.d]
        w.writerow(lead + [_cell(r.ops), _cell(r.wall_ns), _cell(r.peak_bytes), r.status])
    return buf.getvalue()


def doubling_ratios(records: list[BenchRecord], field: str = "ops") -> list[tuple[int, float]]:
    """``(size, value(size) / value(previous size))`` over consecutive complete records."""
    done = [r for r in records if not r.truncated]
    return [(b.size, getattr(b, field) / getattr(a, field)) for a, b in zip(done, done[1:])]
