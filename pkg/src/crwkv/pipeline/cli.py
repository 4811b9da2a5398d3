"""``crwkv`` command line.

Exit status: 0 on success, 1 on invalid input or configuration, 2 when a
numeric failure (non-finite loss, gradient or output) stops the run.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from ..numerics import CrwkvError, NumericError
from .config import fill_dataclass, model_config, parse_overrides, read_kv

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("crwkv")


def _sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_synth(args) -> int:
    from .imageio import save_dataset
    from .synth import synth_generate

    samples = synth_generate(args.n, args.size, args.size, args.difficulty, args.seed)
    save_dataset(args.out, samples, {"n": args.n, "size": args.size, "difficulty": args.difficulty,
                                     "seed": args.seed})
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _train_setup(args):
    from .train import TrainConfig

    values = read_kv(args.config) if args.config else {}
    values.update(parse_overrides(args.set))
    cfg = model_config({"variant": "nano", **values})
    base = TrainConfig.paper() if args.paper_hparams else TrainConfig()
    tcfg = fill_dataclass(TrainConfig, values, base)
    if args.steps is not None:
        tcfg = tcfg.replace(steps=args.steps)
    return cfg, tcfg, values


def cmd_train(args) -> int:
    from .imageio import load_dataset
    from .plotting import plot_training
    from .synth import synth_generate
    from .train import train

    cfg, tcfg, values = _train_setup(args)
    size = int(values.get("size", 64))
    difficulty = int(values.get("difficulty", 1))
    if args.data:
        train_data = load_dataset(args.data)
    else:
        train_data = synth_generate(int(values.get("n_train", 512)), size, size, difficulty, 1000 + tcfg.seed)
    if args.val:
        val_data = load_dataset(args.val)
    else:
        val_data = synth_generate(int(values.get("n_val", 64)), size, size, difficulty, 2000 + tcfg.seed)
    out = Path(args.out)
    result = train(tcfg, cfg, train_data, val_data, out_dir=out)
    plot_training(result.history, result.losses, out / "curves.png")
    print(f"best held-out IoU {result.best_iou:.4f} at step {result.best_step}; "
          f"{len(result.losses)} steps in {result.seconds:.1f}s; checkpoint {out / 'best'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .infer import infer_files

    res = infer_files(args.a, args.b, args.ckpt, args.out, tile=args.tile, threshold=args.threshold,
                      overlay_path=args.overlay, truth_path=args.truth)
    print(f"mask written to {res.mask_path}")
    if res.overlay_path:
        print(f"overlay written to {res.overlay_path}")
    if res.metrics:
        print(" ".join(f"{k}={100 * v:.2f}" for k, v in res.metrics.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import evaluate, metrics_csv
    from .imageio import load_dataset

    cfg, weights, _ = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    m = evaluate(samples, cfg, weights, threshold=args.threshold, per_image=args.per_image)
    text = metrics_csv([{"dataset": args.dataset or Path(args.data).name, "variant": cfg.variant,
                         "threshold": args.threshold, **m}])
    if args.csv:
        Path(args.csv).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import MODEL_TARGET, bench_kernel, bench_model, to_csv
    from .plotting import plot_scaling

    if args.target == MODEL_TARGET:
        cfg = model_config({"variant": args.variant})
        records = bench_model(cfg, args.sizes or (64, 128, 256, 512, 1024), args.repeats)
    else:
        records = bench_kernel(args.target, args.sizes or [2 ** e for e in range(6, 21)], args.d, args.repeats)
    text = to_csv(records)
    if args.csv:
        csv_path = Path(args.csv)
        csv_path.write_text(text)
        plot = plot_scaling(records, csv_path.with_suffix(".png"))
        print(f"wrote {csv_path} and {plot}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() else EXIT_NUMERIC


class _Parser(argparse.ArgumentParser):
    # bad usage is a validation error (exit 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    from .bench import TARGETS

    p = _Parser(prog="crwkv", description="ChangeRWKV change detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic change-detection dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--difficulty", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--data", help="training dataset directory (default: generated)")
    t.add_argument("--val", help="held-out dataset directory (default: generated)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--steps", type=int)
    t.add_argument("--paper-hparams", action="store_true", help="lr 1e-5, 200 epochs, 20 warmup epochs")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="predict a change mask for one image pair")
    i.add_argument("--a", required=True)
    i.add_argument("--b", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--tile", type=int, default=256)
    i.add_argument("--out", default="mask.png")
    i.add_argument("--overlay", help="write a TP/TN/FP/FN overlay here (needs --truth)")
    i.add_argument("--truth", help="ground-truth mask PNG")
    i.add_argument("--threshold", type=float, default=0.5)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--csv")
    e.add_argument("--dataset")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--per-image", action="store_true", help="average per-image metrics")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="scaling sweep of a kernel or the full model")
    b.add_argument("--target", choices=TARGETS, default="wkv-recurrent")
    b.add_argument("--sizes", type=_sizes, help="T values (kernels) or side lengths (model)")
    b.add_argument("--d", type=int, default=8)
    b.add_argument("--variant", default="T")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--csv")
    b.set_defaults(fn=cmd_bench)

    st = sub.add_parser("selftest", help="run the built-in oracle checks")
    st.set_defaults(fn=cmd_selftest)
    return p


def _check_threads() -> None:
    raw = os.environ.get("CRWKV_THREADS")
    if raw is not None and not (raw.isdigit() and int(raw) > 0):
        raise ValueError(f"CRWKV_THREADS must be a positive integer, got {raw!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _check_threads()
        return args.fn(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CrwkvError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
