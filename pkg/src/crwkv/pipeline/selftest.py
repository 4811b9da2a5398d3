"""Quick oracle sweep runnable without pytest (``crwkv selftest``)."""
from __future__ import annotations

import math
import tempfile
import time
from typing import Callable

import numpy as np

from .. import wkv
from ..encoder import ModelConfig, count_flops, count_parameters
from ..numerics import check_gradients, conv2d, count_ops, matmul, no_grad
from ..objective import bce_loss, metrics, ConfusionCounts
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ChangeRWKVParams, forward


def _loop_wkv(k, v, w, u, bidirectional):
    T, d = k.shape
    out = np.zeros((T, d))
    for t in range(T):
        for c in range(d):
            num = den = 0.0
            for i in range(T):
                if i == t:
                    e = u[c] + k[t, c]
                elif i < t or bidirectional:
                    dist = abs(t - i) - 1 if bidirectional else t - 1 - i
                    e = -dist * w[c] + k[i, c]
                else:
                    continue
                num += math.exp(e) * v[i, c]
                den += math.exp(e)
            out[t, c] = num / den
    return out


def check_wkv() -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        T, d = int(rng.integers(1, 24)), int(rng.integers(1, 6))
        k, v = rng.normal(size=(T, d)), rng.normal(size=(T, d))
        w, u = rng.uniform(0, 1, d), rng.normal(size=d)
        for bi, fn in ((False, wkv.wkv_recurrent), (True, wkv.wkv_bidirectional)):
            ref = _loop_wkv(k, v, w, u, bi)
            worst = max(worst, float(np.max(np.abs(fn(k, v, w, u) - ref) / (np.abs(ref) + 1e-12))))
    assert worst <= 1e-10, worst
    return f"max rel err {worst:.2e}"


def check_conv() -> str:
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 7, 6))
    kern = rng.normal(size=(4, 3, 3, 3))
    got = conv2d(x, kern, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(got)
    for o in range(4):
        for i in range(got.shape[1]):
            for j in range(got.shape[2]):
                ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * kern[o])
    err = float(np.max(np.abs(got - ref)))
    assert err < 1e-10, err
    return f"max abs err {err:.2e}"


def check_gradients_ops() -> str:
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    errs = check_gradients(lambda x, y: matmul(x, y), [a, b])
    k, v = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    w, u = rng.uniform(0.1, 1, 3), rng.normal(size=3)
    errs += check_gradients(lambda *t: wkv.wkv(*t), [k, v, w, u])
    worst = max(errs)
    assert worst <= 1e-5, worst
    return f"max rel err {worst:.2e}"


def check_accounting() -> str:
    cfg = ModelConfig.from_variant("pico")
    weights = ChangeRWKVParams.init(cfg, seed=0)
    rng = np.random.default_rng(3)
    A, B = rng.random((1, 3, 32, 32)), rng.random((1, 3, 32, 32))
    with no_grad(), count_ops() as c:
        forward(A, B, cfg, weights)
    n = sum(t.size for t in weights.tensors())
    assert c.ops == count_flops(cfg, 32, 32), (c.ops, count_flops(cfg, 32, 32))
    assert n == count_parameters(cfg, full_model=True)
    return f"{n} params, {c.ops} ops at 32x32"


def check_symmetry_and_checkpoint() -> str:
    cfg = ModelConfig.from_variant("pico")
    weights = ChangeRWKVParams.init(cfg, seed=4)
    rng = np.random.default_rng(4)
    A = rng.random((2, 3, 32, 32)).astype(np.float32)
    B = rng.random((2, 3, 32, 32)).astype(np.float32)
    with no_grad():
        ab = forward(A, B, cfg, weights).data
        ba = forward(B, A, cfg, weights).data
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(tmp, cfg, weights)
            cfg2, w2, _ = load_checkpoint(tmp)
            again = forward(A, B, cfg2, w2).data
    assert np.array_equal(ab, ba)
    assert np.array_equal(ab, again)
    return "swap and round trip bitwise"


def check_objective() -> str:
    bce = bce_loss(np.array([[0, 1], [1, 0]]), np.full((2, 2), 0.5)).item()
    assert abs(bce - math.log(2)) < 1e-6
    m = metrics(ConfusionCounts(tp=5, fp=3, fn=2))
    assert abs(m["IoU"] - 0.5) < 1e-12 and abs(m["F1"] - 2 / 3) < 1e-12
    return f"bce(0.5) = {bce:.6f}"


CHECKS: dict[str, Callable[[], str]] = {
    "wkv-oracles": check_wkv,
    "conv-oracle": check_conv,
    "gradients": check_gradients_ops,
    "accounting": check_accounting,
    "symmetry-checkpoint": check_symmetry_and_checkpoint,
    "objective": check_objective,
}


def run_selftest(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            detail = fn()
            echo(f"PASS {name:22s} {detail} ({time.perf_counter() - t0:.2f}s)")
        except AssertionError as exc:
            ok = False
            echo(f"FAIL {name:22s} {exc}")
    return ok
