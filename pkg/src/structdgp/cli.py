"""Command-line workflow: train, evaluate, bench, export-cov, compare.

Data comes from headerless CSV (last column is the target unless
--target-col says otherwise).  Training writes a run directory with
checkpoint.bin, run.json (split spec + normalization stats) and
history.jsonl; evaluate/export-cov read it back.  STRUCTDGP_THREADS caps the
worker-thread count.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import metrics as metrics_mod
from . import training, variational
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NormStats, SplitSpec, load_csv, make_split
from .model import build_model
from .variational import Architecture

SPLIT_NAMES = {"interp": "interpolation", "extrap": "extrapolation"}


def _apply_thread_cap():
    cap = os.environ.get("STRUCTDGP_THREADS")
    if cap:
        import torch

        torch.set_num_threads(max(1, int(cap)))


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="headerless CSV file")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--target-col", type=int, default=-1)
    p.add_argument("--split", choices=("interp", "extrap"), default="interp")
    p.add_argument("--seed", type=int, default=0)


def _split_data(args):
    x, y = load_csv(args.data, args.delimiter, args.target_col)
    spec = SplitSpec(SPLIT_NAMES[args.split], args.seed)
    return make_split(x, y, spec), spec


def cmd_train(args):
    (train, test), spec = _split_data(args)
    x_tr, y_tr = train
    stats = NormStats.fit(x_tr, y_tr)
    xn, yn = stats.normalize(x_tr, y_tr)
    widths = tuple([args.width] * (args.layers - 1) + [1])
    arch = Architecture(args.layers, widths, args.inducing, x_tr.shape[1])
    model = build_model(xn, arch, args.structure, seed=args.seed, jitter=args.jitter)
    config = training.TrainConfig(
        iterations=args.iters,
        minibatch=args.mbs,
        num_samples=args.samples,
        learning_rate=args.lr,
        jitter=args.jitter,
        seed=args.seed,
    )
    model, history = training.train(model, xn, yn, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.bin")
    with open(out / "history.jsonl", "w") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    run = {
        "data": str(args.data),
        "split": {"mode": spec.mode, "seed": spec.seed},
        "structure": args.structure,
        "arch": {
            "layers": args.layers,
            "width": args.width,
            "inducing": args.inducing,
        },
        "norm_stats": stats.to_dict(),
        "config": {
            "iterations": args.iters,
            "minibatch": args.mbs,
            "samples": args.samples,
            "lr": args.lr,
            "seed": args.seed,
        },
    }
    with open(out / "run.json", "w") as fh:
        json.dump(run, fh, indent=2)
    final = [h["elbo"] for h in history[-20:]]
    if final:
        print(f"trained {len(history)} iterations; last ELBO {np.mean(final):.4f}")
    print(f"run written to {out}")


def cmd_evaluate(args):
    run_dir = Path(args.run)
    with open(run_dir / "run.json") as fh:
        run = json.load(fh)
    model = load_checkpoint(run_dir / "checkpoint.bin")
    data_path = args.data or run["data"]
    x, y = load_csv(data_path, args.delimiter, args.target_col)
    spec = SplitSpec(run["split"]["mode"], run["split"]["seed"])
    (_, _), (x_te, y_te) = make_split(x, y, spec)
    stats = NormStats.from_dict(run["norm_stats"])
    result = metrics_mod.test_metrics(model, x_te, y_te, stats,
                                      num_paths=args.samples, seed=args.seed)
    out = Path(args.out) if args.out else run_dir / "metrics.json"
    with open(out, "w") as fh:
        json.dump(result, fh, indent=2)
    print(f"tll {result['tll']:.4f}  rmse {result['rmse']:.4f}  -> {out}")


def cmd_bench(args):
    structures = args.structure.split(",") if args.structure != "all" else list(
        variational.STRUCTURES
    )
    m_list = [int(v) for v in args.inducing.split(",")]
    rows = bench_mod.bench_runtime(
        structures,
        m_list,
        layers=args.layers,
        tau=args.width,
        reps=args.reps,
        n_data=args.mbs,
        num_samples=args.samples,
        seed=args.seed,
    )
    bench_mod.write_csv(rows, args.out)
    for s in structures:
        if len(m_list) >= 2:
            print(f"{s}: log-log slope vs M = {bench_mod.loglog_slope(rows, s):.2f}")
    print(f"bench table written to {args.out}")


def cmd_export_cov(args):
    model = load_checkpoint(Path(args.run) / "checkpoint.bin" if args.run else args.checkpoint)
    variational.export_covariance_csv(model.factor, args.out)
    print(f"ln|S_M| heat-map data written to {args.out}")


def cmd_compare(args):
    def load_all(paths):
        out = []
        for p in paths:
            with open(p) as fh:
                out.append(json.load(fh))
        return out

    result = metrics_mod.compare_runs(load_all(args.metrics_a), load_all(args.metrics_b))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result, fh, indent=2)
    print(
        f"win frequency A vs B: mean {result['mean']:.3f} (se {result['se']:.3f}) "
        "(per-point ties count 0.5)"
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="structdgp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a CSV dataset")
    _add_data_flags(p)
    p.add_argument("--structure", choices=variational.STRUCTURES, default="star")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--width", type=int, default=5)
    p.add_argument("--inducing", type=int, default=128)
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--mbs", type=int, default=512)
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--jitter", type=float, default=1e-6)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test-set metrics for a trained run")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--data", default=None, help="override the CSV path")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--target-col", type=int, default=-1)
    p.add_argument("--samples", type=int, default=100, help="prediction paths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="gradient-step runtime table")
    p.add_argument("--structure", default="all", help="'all' or comma list")
    p.add_argument("--inducing", default="32,64,128,256", help="comma list of M")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--width", type=int, default=5)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--mbs", type=int, default=512)
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-cov", help="CSV of ln|S_M| for heat maps")
    p.add_argument("--run", default=None, help="run directory")
    p.add_argument("--checkpoint", default=None, help="checkpoint path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_cov)

    p = sub.add_parser(
        "compare",
        help="win frequency of method A vs B from metrics files (ties = 0.5)",
    )
    p.add_argument("--metrics-a", nargs="+", required=True)
    p.add_argument("--metrics-b", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
