"""Command-line entry point: ``simnet {pretrain,train,eval,flops,gradcheck,selftest}``.

Exit status: 0 success, 1 validation failure (failed checks, bad data or
checkpoint, diverged training), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_int_list
from .data import DatasetError, DatasetOnDisk, load_dataset, select_classes, split_holdout
from .flops import CostModel, compare_with_reference, count_costs
from .network import micro_network
from .pretrain import PretrainOptions, format_report, pretrain_network
from .selftest import run_selftest
from .training import TrainingDiverged, evaluate, grad_check, train


def _paths(text: str) -> list:
    return [p.strip() for p in text.split(",") if p.strip()]


def _desc(cfg: RunConfig, paths: str, label_paths: str) -> DatasetOnDisk:
    d = cfg.data
    return DatasetOnDisk(d.format, _paths(paths), _paths(label_paths), d.classes,
                         (d.height, d.width, d.channels), d.label_bytes, d.synthetic_task,
                         d.synthetic_size, cfg.run.seed)


def _prepare(cfg: RunConfig, images, labels):
    if cfg.data.class_filter:
        images, labels = select_classes(images, labels, parse_int_list(cfg.data.class_filter), cfg.data.limit)
    elif cfg.data.limit:
        images, labels = images[: cfg.data.limit], labels[: cfg.data.limit]
    return images, labels


def load_splits(cfg: RunConfig):
    """``{"train": (x, y), "val": (x, y) | None, "test": (x, y) | None}``."""
    images, labels = _prepare(cfg, *load_dataset(_desc(cfg, cfg.data.train, cfg.data.train_labels)))
    train_split, val_split = split_holdout(images, labels, cfg.data.holdout)
    test_split = None
    if cfg.data.test and cfg.data.format != "synthetic":
        test_split = _prepare(cfg, *load_dataset(_desc(cfg, cfg.data.test, cfg.data.test_labels)))
    return {"train": train_split, "val": val_split, "test": test_split}


def _pretrain(cfg: RunConfig, spec, images):
    p = cfg.pretrain
    opts = PretrainOptions(p.patches, p.subsample or None, cfg.pretrain_shape(), p.whitening,
                           p.max_iter, p.tol, cfg.run.seed)
    return pretrain_network(images, spec, opts)


def _initial_spec(cfg: RunConfig, train_images):
    spec = cfg.build_network()
    if cfg.data.mean_subtraction:
        spec.input_mean = train_images.mean(axis=(0, 1, 2))
    return spec


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "holdout", None) is not None:
        cfg.data.holdout = args.holdout
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    splits = load_splits(cfg)
    images = splits["train"][0]
    spec, reports = _pretrain(cfg, _initial_spec(cfg, images), images)
    save_checkpoint(spec, args.out or cfg.run.checkpoint)
    with open(args.report or cfg.run.report, "w", encoding="utf-8") as fh:
        fh.write(format_report(reports))
    print(f"pretrained {len(spec.layers)} layer(s) -> {args.out or cfg.run.checkpoint}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    splits = load_splits(cfg)
    images, labels = splits["train"]
    if args.init:
        spec = load_checkpoint(args.init)
    else:
        spec = _initial_spec(cfg, images)
        if cfg.pretrain.enabled:
            spec, reports = _pretrain(cfg, spec, images)
            with open(cfg.run.report, "w", encoding="utf-8") as fh:
                fh.write(format_report(reports))
    clock = (lambda: 0.0) if args.fixed_clock else None
    kwargs = {"clock": clock} if clock else {}
    with open(args.metrics or cfg.run.metrics, "w", encoding="utf-8") as metrics:
        spec, history = train(images, labels, spec, cfg.train, val=splits["val"],
                              metrics_stream=metrics, **kwargs)
    save_checkpoint(spec, args.out or cfg.run.checkpoint)
    last = history[-1]
    print(f"epoch {last.epoch}: train_loss {last.train_loss:.6f} train_acc {last.train_acc:.6f} "
          f"val_acc {last.val_acc:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    spec = load_checkpoint(args.checkpoint)
    split = load_splits(cfg)[args.split]
    if split is None:
        print(f"split {args.split!r} is empty for this configuration", file=sys.stderr)
        return 2
    acc, loss = evaluate(spec, *split, batch_size=args.batch_size)
    print(f"accuracy\t{acc:.6f}\nmean_loss\t{loss:.10g}")
    return 0


def _parse_shape(text: str) -> tuple:
    try:
        h, w, c = (int(t) for t in text.lower().split("x"))
    except ValueError as err:
        raise ConfigError(f"--input must look like HxWxC, got {text!r}") from err
    return h, w, c


def cmd_flops(args) -> int:
    if bool(args.config) == bool(args.checkpoint):
        print("flops needs exactly one of --config or --checkpoint", file=sys.stderr)
        return 2
    if args.config:
        cfg = _load_cfg(args)
        spec, shape = cfg.build_network(), cfg.input_shape
    else:
        spec = load_checkpoint(args.checkpoint)
        if not args.input:
            print("--input HxWxC is required with --checkpoint", file=sys.stderr)
            return 2
        shape = None
    if args.input:
        shape = _parse_shape(args.input)
    report = count_costs(spec, shape, CostModel(transcendental=args.transcendental))
    print(report.format_tsv() if args.tsv else report.format_table())
    if args.compare:
        print(compare_with_reference(report, *args.compare))
    return 0


def cmd_gradcheck(args) -> int:
    spec, x, label = micro_network(args.seed)
    report = grad_check(spec, x, label, tolerance=args.tolerance)
    print(report.format())
    print(f"{report.checked} entries checked: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def cmd_selftest(args) -> int:
    return 0 if run_selftest(args.seed, sys.stdout) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simnet", description="Similarity networks: pretrain, train, evaluate and cost.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="unsupervised layer-by-layer initialisation")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--out")
    p.add_argument("--report")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised training")
    p.add_argument("--config", required=True)
    p.add_argument("--init", help="start from this checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--metrics")
    p.add_argument("--fixed-clock", action="store_true", help="write 0 for wall_seconds (byte-reproducible metrics)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and mean loss of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="per-inference FLOP and parameter counts")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="input shape HxWxC")
    p.add_argument("--transcendental", type=int, default=10, help="FLOPs per exp/log/pow")
    p.add_argument("--tsv", action="store_true")
    p.add_argument("--compare", nargs=2, type=float, metavar=("FLOPS", "PARAMS"),
                   help="also print ratios against externally reported totals")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, TrainingDiverged, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


run_command = main

if __name__ == "__main__":
    sys.exit(main())
