"""Training loop: Adam, linear warmup then cosine decay, global-norm clipping."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..encoder import ModelConfig
from ..numerics import ConfigError, NumericError, Tape, Tensor, backward, ctn
from ..objective import total_loss
from .checkpoint import save_checkpoint
from .evaluate import evaluate
from .model import ChangeRWKVParams, forward
from .synth import ChangeSample, stack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    warmup_epochs: int = 2
    clip: float = 0.5
    lam: float = 1.0
    seed: int = 0
    cosine: bool = True
    steps: int | None = None  # when set, overrides epochs
    flip: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("lr", "batch_size", "epochs", "clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_epochs < 0 or self.lam < 0:
            raise ConfigError("weight_decay, warmup_epochs and lam must be non-negative")
        if self.steps is not None and self.steps <= 0:
            raise ConfigError("steps must be positive")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Published schedule: lr 1e-5, 200 epochs, 20 warmup epochs."""
        return cls(**{"lr": 1e-5, "epochs": 200, "warmup_epochs": 20, **overrides})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def schedule(tcfg: TrainConfig, steps_per_epoch: int) -> tuple[int, int]:
    """(total steps, warmup steps)."""
    total = tcfg.steps if tcfg.steps is not None else tcfg.epochs * steps_per_epoch
    warmup = min(tcfg.warmup_epochs * steps_per_epoch, total)
    return total, warmup


def lr_at(step: int, base: float, total: int, warmup: int, cosine: bool = True) -> float:
    """Learning rate for 0-based ``step``: linear warmup, then cosine decay to 0."""
    if step < warmup:
        return base * (step + 1) / warmup
    if not cosine:
        return base
    span = max(total - warmup, 1)
    frac = min((step - warmup) / span, 1.0)
    return 0.5 * base * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


@dataclass
class TrainResult:
    weights: ChangeRWKVParams
    best_weights: ChangeRWKVParams
    history: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    best_iou: float = 0.0
    best_step: int = 0
    seconds: float = 0.0


HISTORY_FIELDS = ("epoch", "step", "lr", "train_loss", "val_iou", "val_f1", "seconds")


def _snapshot(weights: ChangeRWKVParams, cfg: ModelConfig) -> ChangeRWKVParams:
    dtype = weights.tensors()[0].data.dtype if weights.tensors() else np.float32
    copy = ChangeRWKVParams.init(cfg, seed=0, dtype=dtype)
    for dst, src in zip(copy.tensors(), weights.tensors()):
        dst.data = src.data.copy()
    return copy


def _dump_batch(out_dir: Path | None, step: int, batch_ids: np.ndarray, A, B, M) -> str:
    if out_dir is None:
        return ""
    dump = out_dir / f"nan_step{step}"
    dump.mkdir(parents=True, exist_ok=True)
    ctn.save(dump / "A.ctn", A)
    ctn.save(dump / "B.ctn", B)
    ctn.save(dump / "M.ctn", M)
    (dump / "ids.txt").write_text(" ".join(str(int(i)) for i in batch_ids) + "\n")
    return f"; batch dumped to {dump}"


def train(tcfg: TrainConfig, cfg: ModelConfig, train_data: Sequence[ChangeSample],
          val_data: Sequence[ChangeSample] = (), out_dir=None, dtype=np.float32,
          weights: ChangeRWKVParams | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train ``cfg`` on ``train_data``; evaluates on ``val_data`` after every epoch.

    The best held-out IoU checkpoint is written to ``out_dir`` (when given)
    together with ``metrics.csv``.  A non-finite loss aborts with NumericError
    naming the step and sample indices of the offending batch.
    """
    if not train_data:
        raise ConfigError("no training samples")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(tcfg.seed)
    if weights is None:
        weights = ChangeRWKVParams.init(cfg, seed=tcfg.seed, dtype=dtype)
    params = weights.tensors()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay)
    A_all, B_all, M_all = stack(list(train_data))
    n = len(A_all)
    spe = math.ceil(n / tcfg.batch_size)
    total, warmup = schedule(tcfg, spe)

    result = TrainResult(weights, _snapshot(weights, cfg))
    start = time.perf_counter()
    step, epoch = 0, 0
    while step < total:
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(spe):
            if step >= total:
                break
            ids = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            A, B, M = A_all[ids], B_all[ids], M_all[ids]
            if tcfg.flip:
                flips = rng.random(2) < 0.5
                if flips[0]:
                    A, B, M = A[..., ::-1], B[..., ::-1], M[..., ::-1]
                if flips[1]:
                    A, B, M = A[..., ::-1, :], B[..., ::-1, :], M[..., ::-1, :]
                A, B, M = (np.ascontiguousarray(x) for x in (A, B, M))
            lr = lr_at(step, tcfg.lr, total, warmup, tcfg.cosine)
            try:
                with Tape():
                    loss = total_loss(M, forward(A, B, cfg, weights), tcfg.lam)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NumericError("non-finite loss")
                    got = backward(loss)
                grads = [np.array(got.get(p, np.zeros_like(p.data)), dtype=p.data.dtype) for p in params]
                for p in params:
                    p.grad = None
                clip_grad_norm(grads, tcfg.clip)
            except NumericError as exc:
                where = _dump_batch(out_dir, step, ids, A, B, M)
                raise NumericError(f"{exc} at step {step} (samples {ids.tolist()}){where}") from None
            opt.step(grads, lr)
            result.losses.append(value)
            epoch_losses.append(value)
            if on_step is not None:
                on_step(step, value)
            step += 1
        epoch += 1
        row = {"epoch": epoch, "step": step, "lr": lr, "train_loss": float(np.mean(epoch_losses)),
               "val_iou": float("nan"), "val_f1": float("nan"),
               "seconds": time.perf_counter() - start}
        if val_data:
            m = evaluate(val_data, cfg, weights)
            row["val_iou"], row["val_f1"] = m["IoU"], m["F1"]
            if m["IoU"] > result.best_iou or step == spe:
                result.best_iou, result.best_step = m["IoU"], step
                result.best_weights = _snapshot(weights, cfg)
                if out_dir is not None:
                    save_checkpoint(out_dir / "best", cfg, weights,
                                    {"step": step, "epoch": epoch, "val_iou": m["IoU"], "seed": tcfg.seed})
        result.history.append(row)
        log.info("epoch %d step %d loss %.4f val IoU %.4f", epoch, step, row["train_loss"], row["val_iou"])
    if not val_data:
        result.best_weights = _snapshot(weights, cfg)
        result.best_step = step
    result.seconds = time.perf_counter() - start
    if out_dir is not None:
        save_checkpoint(out_dir / "last", cfg, weights, {"step": step, "epoch": epoch, "seed": tcfg.seed})
        write_history(out_dir / "metrics.csv", result.history)
    return result


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
