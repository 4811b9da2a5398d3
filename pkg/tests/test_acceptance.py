"""Acceptance checks, one test per criterion; each records a PASS/FAIL line."""
import math
import statistics
import time

import numpy as np
import pytest

from crwkv import params as P
from crwkv.blocks import BlockParams, rwkv_block
from crwkv.encoder import ModelConfig, count_flops, count_parameters
from crwkv.numerics import (
    Tape,
    backward,
    check_gradients,
    clamp,
    concat,
    conv2d,
    default_dtype,
    div,
    exp,
    group_norm,
    layer_norm,
    log,
    matmul,
    no_grad,
    reduce,
    relu,
    resample2d,
    sigmoid,
    square,
)
from crwkv.numerics.gradcheck import rel_error
from crwkv.objective import ConfusionCounts, bce_loss, dice_loss, metrics, total_loss
from crwkv.pipeline.bench import bench_kernel, doubling_ratios, model_ops
from crwkv.pipeline.checkpoint import load_checkpoint, save_checkpoint
from crwkv.pipeline.evaluate import evaluate
from crwkv.pipeline.infer import infer_probs
from crwkv.pipeline.model import ChangeRWKVParams, forward
from crwkv.pipeline.synth import synth_generate
from crwkv.pipeline.train import TrainConfig, train
from crwkv.stfm import StfmParams, stfm
from crwkv.encoder import FeaturePyramid
from crwkv.wkv import wkv, wkv_bidirectional, wkv_naive, wkv_recurrent

F32_TOL, F64_TOL = 1e-3, 1e-5


def random_case(r, dtype):
    T, d = int(r.integers(1, 65)), int(r.integers(1, 17))
    k, v = r.normal(size=(T, d)), r.normal(size=(T, d))
    w, u = r.uniform(0.0, 2.0, d), r.normal(size=d)
    return tuple(a.astype(dtype) for a in (k, v, w, u))


def max_rel(a, b):
    return float(np.max(np.abs(np.asarray(a, np.float64) - b) / np.maximum(np.abs(b), 1e-6)))


def loop_bidirectional(k, v, w, u):
    k, v, w, u = (np.asarray(a, dtype=np.float64).tolist() for a in (k, v, w, u))
    T, d = len(k), len(k[0])
    out = np.zeros((T, d))
    for t in range(T):
        for c in range(d):
            expo = [u[c] + k[t][c] if i == t else -(abs(t - i) - 1) * w[c] + k[i][c] for i in range(T)]
            m = max(expo)
            wts = [math.exp(e - m) for e in expo]
            out[t, c] = sum(wt * v[i][c] for i, wt in enumerate(wts)) / sum(wts)
    return out


def test_criterion_01_wkv_oracle_equivalence(report):
    wkv_recurrent(*random_case(np.random.default_rng(0), np.float64))  # JIT warm-up
    errs = {}
    start = time.perf_counter()
    for dtype in (np.float64, np.float32):
        r = np.random.default_rng(101)
        errs[dtype] = max(max_rel(wkv_recurrent(*c), wkv_naive(*c).astype(np.float64))
                          for c in (random_case(r, dtype) for _ in range(100)))
    seconds = time.perf_counter() - start
    ok = errs[np.float64] <= 1e-10 and errs[np.float32] <= 1e-5 and seconds < 5
    assert report(1, "WKV recurrent vs naive", ok,
                  f"f64 {errs[np.float64]:.2e}, f32 {errs[np.float32]:.2e}, {seconds:.2f}s")


def test_criterion_02_bidirectional_oracle(report):
    wkv_bidirectional(*random_case(np.random.default_rng(0), np.float64))
    errs, seconds = {}, 0.0
    for dtype in (np.float64, np.float32):
        r = np.random.default_rng(202)
        worst = 0.0
        for _ in range(100):
            c = random_case(r, dtype)
            start = time.perf_counter()
            out = wkv_bidirectional(*c)
            seconds += time.perf_counter() - start
            worst = max(worst, max_rel(out, loop_bidirectional(*c)))
        errs[dtype] = worst
    r = np.random.default_rng(203)
    reversal = True
    for _ in range(20):
        k, v, w, u = random_case(r, np.float64)
        reversal &= np.array_equal(wkv_bidirectional(k[::-1], v[::-1], w, u)[::-1], wkv_bidirectional(k, v, w, u))
    ok = errs[np.float64] <= 1e-10 and errs[np.float32] <= 1e-5 and reversal and seconds < 5
    assert report(2, "bidirectional WKV vs double loop", ok,
                  f"f64 {errs[np.float64]:.2e}, f32 {errs[np.float32]:.2e}, reversal exact {reversal}, "
                  f"kernel {seconds:.2f}s")


def parameter_gradient_error(loss_fn, tensors, n_coords, seed, h=1e-6):
    """Backprop vs central differences on ``n_coords`` random parameter entries."""
    r = np.random.default_rng(seed)
    for t in tensors:
        t.requires_grad = True
    with Tape():
        grads = backward(loss_fn())
    sizes = np.array([t.size for t in tensors])
    ends = np.cumsum(sizes)
    flat = r.choice(ends[-1], size=min(n_coords, int(ends[-1])), replace=False)
    ana, num = [], []
    for f in flat:
        ti = int(np.searchsorted(ends, f, side="right"))
        t = tensors[ti]
        idx = np.unravel_index(int(f - (ends[ti] - sizes[ti])), t.shape)
        ana.append(grads[t][idx] if t in grads else 0.0)
        old = t.data[idx]
        with no_grad():
            t.data[idx] = old + h
            up = loss_fn().item()
            t.data[idx] = old - h
            down = loss_fn().item()
        t.data[idx] = old
        num.append((up - down) / (2 * h))
    return rel_error(np.array(ana), np.array(num))


def primitive_cases(r):
    pos = lambda *s: r.uniform(0.5, 2.0, size=s)
    away = lambda *s: r.choice([-1, 1], size=s) * r.uniform(0.1, 1.0, size=s)
    return {
        "add/mul/sub": (lambda a, b: (a + b) * a - b, [r.normal(size=(3, 4)), r.normal(size=(4,))]),
        "div": (lambda a, b: div(a, b), [r.normal(size=(3, 4)), pos(3, 4)]),
        "exp/log": (lambda a: exp(a) + log(a), [pos(3, 4)]),
        "sigmoid": (lambda a: sigmoid(a), [r.normal(size=(3, 4))]),
        "relu/square": (lambda a: square(relu(a)), [away(3, 4)]),
        "clamp": (lambda a: clamp(a, -0.05, 0.05), [away(3, 4)]),
        "reduce": (lambda a: reduce("mean", a, axis=1) + reduce("max", a, axis=0).sum(), [r.normal(size=(4, 4))]),
        "matmul": (lambda a, b: matmul(a, b), [r.normal(size=(2, 3, 5)), r.normal(size=(5, 2))]),
        "concat": (lambda a, b: concat([a, b], axis=1), [r.normal(size=(3, 2)), r.normal(size=(3, 4))]),
        "conv2d": (lambda x, k, b: conv2d(x, k, b, stride=2, padding=1),
                   [r.normal(size=(1, 2, 7, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]),
        "bilinear-up": (lambda x: resample2d(x, (6, 8), "bilinear-up"), [r.normal(size=(1, 2, 3, 4))]),
        "avgpool-down": (lambda x: resample2d(x, (2, 2), "avgpool-down"), [r.normal(size=(1, 2, 8, 8))]),
        "layer_norm": (lambda x, w, b: layer_norm(x, w, b, axis=1), [r.normal(size=(2, 6, 3, 3)),
                                                                     r.normal(size=6), r.normal(size=6)]),
        "group_norm": (lambda x, w, b: group_norm(x, 3, w, b), [r.normal(size=(2, 6, 3, 3)),
                                                               r.normal(size=6), r.normal(size=6)]),
        "wkv": (lambda k, v, w, u: wkv(k, v, w, u), [r.normal(size=(8, 4)), r.normal(size=(8, 4)),
                                                     r.uniform(0, 2, 4), r.normal(size=4)]),
        "bi-wkv": (lambda k, v, w, u: wkv(k, v, w, u, bidirectional=True),
                   [r.normal(size=(8, 4)), r.normal(size=(8, 4)), r.uniform(0, 2, 4), r.normal(size=4)]),
        "loss": (lambda p: total_loss((np.arange(12).reshape(3, 4) % 3 == 0).astype(float), p),
                 [r.uniform(0.1, 0.9, size=(3, 4))]),
    }


def test_criterion_03_gradient_suite(report):
    start = time.perf_counter()
    worst = {np.float64: 0.0, np.float32: 0.0}
    failures = []
    for name, (fn, arrays) in primitive_cases(np.random.default_rng(303)).items():
        for dtype in worst:
            err = max(check_gradients(fn, [a.astype(dtype) for a in arrays], seed=3))
            worst[dtype] = max(worst[dtype], err)
            if err > (F64_TOL if dtype == np.float64 else F32_TOL):
                failures.append(f"{name}/{np.dtype(dtype).name}={err:.1e}")

    composite = {}
    with default_dtype(np.float64):
        for mix in ("se", "mlp"):
            p = BlockParams.init(4, np.random.default_rng(1), mix)
            x = np.random.default_rng(2).normal(size=(1, 4, 4, 4))
            composite[f"block-{mix}"] = parameter_gradient_error(
                lambda: square(rwkv_block(x, p)).sum(), [t for _, t in P.named_tensors(p)], 40, 3)
        cfg = ModelConfig.from_variant("pico")
        sp = StfmParams.init(cfg, np.random.default_rng(4))
        r = np.random.default_rng(5)
        pa = FeaturePyramid(*[r.normal(size=(1, d, 16 >> i, 16 >> i)) for i, d in enumerate(cfg.dims)])
        pb = FeaturePyramid(*[r.normal(size=(1, d, 16 >> i, 16 >> i)) for i, d in enumerate(cfg.dims)])
        composite["stfm"] = parameter_gradient_error(
            lambda: sum(square(f).sum() for f in stfm(pa, pb, sp, cfg)), [t for _, t in P.named_tensors(sp)], 40, 6)
    nano = ModelConfig.from_variant("nano")
    w = ChangeRWKVParams.init(nano, seed=7, dtype=np.float64)
    r = np.random.default_rng(8)
    A, B = r.random((1, 3, 32, 32)), r.random((1, 3, 32, 32))
    M = (r.random((1, 32, 32)) > 0.7).astype(np.float64)
    composite["nano end-to-end"] = parameter_gradient_error(lambda: total_loss(M, forward(A, B, nano, w)),
                                                            w.tensors(), 50, 9)
    failures += [f"{k}={v:.1e}" for k, v in composite.items() if v > F64_TOL]
    seconds = time.perf_counter() - start
    ok = not failures and seconds < 120
    detail = (f"ops f64 {worst[np.float64]:.1e}, f32 {worst[np.float32]:.1e}; "
              + ", ".join(f"{k} {v:.1e}" for k, v in composite.items()) + f"; {seconds:.0f}s")
    assert report(3, "finite-difference gradient suite", ok, detail + (f"; over: {failures}" if failures else ""))


def test_criterion_04_linear_scaling(report):
    rec = bench_kernel("wkv-recurrent", [2 ** e for e in range(12, 21)], repeats=1, budget_s=60)
    rec_ratios = [x for _, x in doubling_ratios(rec)]
    naive = bench_kernel("wkv-naive", [512, 1024, 2048, 4096], repeats=1, budget_s=120)
    naive_ratios = [x for _, x in doubling_ratios(naive)]
    cfg = ModelConfig.from_variant("T")
    weights = ChangeRWKVParams.init(cfg)
    model_ratio = model_ops(cfg, weights, 512) / model_ops(cfg, weights, 256)
    wall = [x for _, x in doubling_ratios(rec, "wall_ns")]
    ok = (len(rec_ratios) == 8 and all(abs(x - 2.0) <= 0.05 for x in rec_ratios)
          and len(naive_ratios) == 3 and min(naive_ratios) >= 3.9 and 3.8 <= model_ratio <= 4.4)
    assert report(4, "near-linear scaling of counted ops", ok,
                  f"recurrent {min(rec_ratios):.3f}..{max(rec_ratios):.3f}, naive >= {min(naive_ratios):.3f}, "
                  f"T 512/256 {model_ratio:.3f}; recurrent wall ratios (info) "
                  + ",".join(f"{x:.2f}" for x in wall))


REFERENCE_PARAMS = {"T": 4.66e6, "S": 12.00e6, "B": 20.50e6}
REFERENCE_FLOPS_256 = {"T": 9.40e9, "S": 18.15e9, "B": 33.56e9}
REFERENCE_FLOPS_B_512 = 134.25e9


def test_criterion_05_accounting_vs_reference(report):
    ratios = {}
    for v in "TSB":
        cfg = ModelConfig.from_variant(v)
        ratios[f"{v} params"] = count_parameters(cfg, full_model=True) / REFERENCE_PARAMS[v]
        ratios[f"{v} FLOPs@256"] = count_flops(cfg, 256, 256) / REFERENCE_FLOPS_256[v]
    ratios["B FLOPs@512"] = count_flops(ModelConfig.from_variant("B"), 512, 512) / REFERENCE_FLOPS_B_512
    ok = all(0.75 <= x <= 1.25 for x in ratios.values())
    detail = ", ".join(f"{k} x{x:.2f}" for k, x in ratios.items())
    assert report(5, "parameter/FLOP accounting within 25% of the reference counts", ok,
                  detail + ("" if ok else "; reconciliation in the decisions ledger"))


def test_criterion_06_swap_symmetry(report):
    cfg = ModelConfig.from_variant("T")
    w = ChangeRWKVParams.init(cfg, seed=0)
    worst, bitwise = 0.0, True
    for seed in range(10):
        r = np.random.default_rng(600 + seed)
        A, B = r.random((3, 64, 64), dtype=np.float32), r.random((3, 64, 64), dtype=np.float32)
        with no_grad():
            ab, ba = forward(A, B, cfg, w).data, forward(B, A, cfg, w).data
        worst = max(worst, float(np.max(np.abs(ab - ba) / np.abs(ab))))
        bitwise &= ab.tobytes() == ba.tobytes()
    assert report(6, "temporal swap symmetry", worst <= 1e-6, f"max rel {worst:.1e}, bitwise {bitwise}")


def test_criterion_07_loss_analytics(report):
    r = np.random.default_rng(700)
    M = (r.random((16, 16)) > 0.5).astype(np.float64)
    bce_half = abs(bce_loss(M, np.full_like(M, 0.5)).item() - math.log(2))
    ones, zeros = np.ones((8, 8)), np.zeros((8, 8))
    dice_exact = dice_loss(ones, ones).item() == 0.0 and dice_loss(zeros, zeros).item() == 0.0
    worst = 0.0
    for _ in range(100):
        c = ConfusionCounts(*(int(x) for x in r.integers(0, 10_000, size=4)))
        m = metrics(c)
        worst = max(worst, abs(m["F1"] - 2 * m["IoU"] / (1 + m["IoU"])))
    ok = bce_half <= 1e-6 and dice_exact and worst <= 1e-12
    assert report(7, "loss and metric identities", ok,
                  f"|bce(0.5) - ln2| {bce_half:.1e}, dice exact {dice_exact}, F1/IoU identity {worst:.1e}")


_RUNS: dict = {}


def desk_run(seed: int, fusion: str) -> dict:
    """Criterion-8 protocol: nano on difficulty-1 64x64 synthetic tiles for 2000 steps."""
    key = (seed, fusion)
    if key not in _RUNS:
        cfg = ModelConfig.from_variant("nano", fusion=fusion)
        train_data = synth_generate(512, 64, 64, difficulty=1, seed=1000 + seed)
        val_data = synth_generate(64, 64, 64, difficulty=1, seed=2000 + seed)
        test_data = synth_generate(128, 64, 64, difficulty=1, seed=3000 + seed)
        res = train(TrainConfig(seed=seed, steps=2000), cfg, train_data, val_data)
        _RUNS[key] = {"iou": evaluate(test_data, cfg, res.best_weights)["IoU"], "seconds": res.seconds}
    return _RUNS[key]


@pytest.mark.slow
def test_criterion_08_desk_training(report):
    runs = [desk_run(s, "cross_cbam") for s in range(3)]
    iou = statistics.median(r["iou"] for r in runs)
    minutes = [r["seconds"] / 60 for r in runs]
    ok = iou >= 0.90 and max(minutes) <= 30
    assert report(8, "desk-scale training, nano, 2000 steps", ok,
                  "held-out IoU " + ", ".join(f"{r['iou']:.4f}" for r in runs) + f" (median {iou:.4f}); "
                  + "minutes " + ", ".join(f"{m:.1f}" for m in minutes))


@pytest.mark.slow
def test_criterion_09_fusion_ablation(report):
    cross = [desk_run(s, "cross_cbam")["iou"] for s in range(3)]
    diff = [desk_run(s, "siamdiff")["iou"] for s in range(3)]
    report(9, "Cross-CBAM vs SiamDiff (informational)", True,
           f"cross-cbam {statistics.median(cross):.4f} ({', '.join(f'{x:.4f}' for x in cross)}), "
           f"siamdiff {statistics.median(diff):.4f} ({', '.join(f'{x:.4f}' for x in diff)})")


def test_criterion_10_roundtrip_and_determinism(report, tmp_path):
    cfg = ModelConfig.from_variant("T")
    w = ChangeRWKVParams.init(cfg, seed=10)
    save_checkpoint(tmp_path / "ck", cfg, w)
    cfg2, w2, _ = load_checkpoint(tmp_path / "ck")
    ckpt_ok = cfg2 == cfg and all(a.data.tobytes() == b.data.tobytes() for a, b in zip(w.tensors(), w2.tensors()))

    nano = ModelConfig.from_variant("nano")
    data = synth_generate(16, 64, 64, seed=5)
    runs = [train(TrainConfig(seed=3, steps=10), nano, data) for _ in range(2)]
    train_ok = (np.array(runs[0].losses).tobytes() == np.array(runs[1].losses).tobytes()
                and all(a.data.tobytes() == b.data.tobytes()
                        for a, b in zip(runs[0].weights.tensors(), runs[1].weights.tensors())))

    r = np.random.default_rng(1000)
    A, B = r.random((3, 256, 256), dtype=np.float32), r.random((3, 256, 256), dtype=np.float32)
    with no_grad():
        untiled = forward(A, B, cfg2, w2).data
    tiled_ok = np.array_equal(infer_probs(A, B, cfg2, w2, tile=256), untiled)
    assert report(10, "round trip and determinism", ckpt_ok and train_ok and tiled_ok,
                  f"checkpoint bitwise {ckpt_ok}, 10 training steps bitwise {train_ok}, tiled = untiled {tiled_ok}")
