"""Command-line entry point.

    gaitprop train  --config run.cfg [--out DIR]
    gaitprop eval   --checkpoint DIR/checkpoint.bin --dataset SPEC [--top-k K]
    gaitprop angles --config run.cfg [--out DIR]

Dataset specs for ``eval``: ``synthetic:classes=10,features=64,per_class=50,seed=0[,separation=6][,split=test]``,
``idx:<dir>``, ``mnist5k[:<dir>]`` or ``cifar10:<dir>``.

Exit codes: 0 success, 2 configuration error, 3 runtime or numerical error.
"""

import argparse
import logging
import os
import sys

import numpy as np

from .checkpoint import checkpoint_load
from .config import _shape, parse_config
from .data import load_cifar10, load_idx_dir, synthetic_dataset, write_mnist_subset
from .errors import ConfigError, GaitPropError
from .training import Trainer, evaluate, load_datasets

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def parse_dataset_spec(spec):
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        opts = dict(item.split("=", 1) for item in rest.split(",") if item)
        try:
            ds = synthetic_dataset(
                int(opts.get("classes", 10)),
                _shape(opts.get("features", "64")),
                int(opts.get("per_class", 50)),
                int(opts.get("seed", 0)),
                float(opts.get("separation", 6.0)),
                opts.get("split", "test"),
            )
        except ValueError as exc:
            raise ConfigError(f"bad synthetic dataset spec: {exc}", key="dataset") from None
        return ds
    if kind in ("idx", "mnist5k"):
        path = rest or os.path.join(os.path.expanduser("~"), ".cache", "gaitprop", "mnist5k")
        if kind == "mnist5k" and not os.path.exists(os.path.join(path, "test-labels.idx")):
            write_mnist_subset(path)
        return load_idx_dir(path)[1]
    if kind == "cifar10":
        return load_cifar10(rest)[1]
    raise ConfigError(f"unknown dataset spec {spec!r}", key="dataset")


def _read_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None


def _summarize_angles(metrics, out):
    rows = metrics.select("angle_deg")
    if not rows:
        return
    layers = sorted({r[2] for r in rows}, key=lambda l: (l == "all", l if l != "all" else 0))
    print("mean angle vs BP (degrees):", file=out)
    for layer in layers:
        vals = metrics.values("angle_deg", layer)
        vals = vals[np.isfinite(vals)]
        mean = f"{vals.mean():.4f}" if vals.size else "undefined"
        print(f"  layer {layer}: {mean}", file=out)


def cmd_train(args, measure_only=False):
    cfg = _read_config(args.config)
    if measure_only:
        cfg.angles = True
    train, test = load_datasets(cfg)
    trainer = Trainer(cfg)
    ckpt = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        ckpt = os.path.join(args.out, "checkpoint.bin")
    metrics = trainer.run(train, test, checkpoint_path=None if measure_only else ckpt)
    if args.out:
        name = "angles.csv" if measure_only else "metrics.csv"
        if measure_only:
            from .training import MetricsLog

            only = MetricsLog()
            only.rows = [r for r in metrics.rows if r[3] == "angle_deg"]
            metrics_out = only
        else:
            metrics_out = metrics
        metrics_out.write_csv(os.path.join(args.out, name))
    if measure_only:
        _summarize_angles(metrics, sys.stdout)
    else:
        for metric in ("train_acc", "test_acc"):
            vals = metrics.values(metric)
            if vals.size:
                print(f"final {metric}: {vals[-1]:.4f}")
    return 0


def cmd_eval(args):
    net, _, _ = checkpoint_load(args.checkpoint)
    ds = parse_dataset_spec(args.dataset)
    ds.inputs = ds.inputs.astype(net.dtype)
    acc = evaluate(net, ds, k=args.top_k)
    print(f"top-{args.top_k} accuracy: {acc:.4f} ({len(ds)} samples)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="gaitprop", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--top-k", type=int, default=1)
    p = sub.add_parser("angles", help="measurement run: log update angles against BP")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "angles":
            return cmd_train(args, measure_only=True)
        return cmd_eval(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GaitPropError, ArithmeticError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
