"""Command-line entry point.

Subcommands: train, eval, bench-mem, bench-latency, selftest. Exit codes:
0 on success, 1 on usage errors, 2 on runtime failures. Logs go to stderr;
results go to the files named by the config or flags.
"""

import argparse
import logging
import os
import sys

import numpy as np

from .bench import (VARIANT_NAMES, bench_latency, bench_peak_memory, emit_csv)
from .config import load_config
from .data import TEST_FILES, TRAIN_FILES, load_cifar10, synthetic_dataset
from .errors import ConfigurationError, DataFormatError, DivergedError
from .train import METRICS_HEADER, evaluate, train, write_metrics_csv
from .weights import load_weights, save_weights

log = logging.getLogger("eaanet")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError("%s: %s" % (self.prog, message))


def _build_parser():
    parser = _Parser(prog="eaanet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--data-dir", help="override data.dir")
    p.add_argument("--out", help="override out.dir")

    p = sub.add_parser("eval", help="evaluate saved weights on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--data-dir", help="override data.dir")

    p = sub.add_parser("bench-mem", help="peak-memory scaling sweep")
    p.add_argument("--variants", required=True,
                   help="comma list from: %s" % ", ".join(VARIANT_NAMES))
    p.add_argument("--sides", required=True,
                   help="comma list of ascending input sides (>=32, /16)")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--budget-mb", type=int, default=2048,
                   help="skip points whose activation lower bound exceeds this")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("bench-latency", help="forward-pass latency per image")
    p.add_argument("--variants", required=True)
    p.add_argument("--side", type=int, required=True)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--out", required=True)

    sub.add_parser("selftest", help="gradient, equivalence, and mask checks")
    return parser


def _cifar_present(directory):
    return all(os.path.exists(os.path.join(directory, name))
               for name in TRAIN_FILES + TEST_FILES)


def _resolve_datasets(cfg):
    """(train_ds, test_ds) per data.source; auto prefers CIFAR-10 on disk
    and falls back to the synthetic fixture."""
    source = cfg.data_source
    if source == "auto":
        source = "cifar10" if _cifar_present(cfg.data_dir) else "synthetic"
        log.info("data.source=auto resolved to %s", source)
    if source == "cifar10":
        train_ds, test_ds = load_cifar10(cfg.data_dir)
        if cfg.subset:
            train_ds = train_ds.subset(np.arange(min(cfg.subset, len(train_ds))))
            test_ds = test_ds.subset(np.arange(min(cfg.holdout, len(test_ds))))
        return train_ds, test_ds
    full = synthetic_dataset(cfg.synthetic_size, cfg.model.classes, cfg.train.seed)
    if cfg.holdout >= len(full):
        raise ConfigurationError(
            "data.holdout=%d leaves no training rows out of %d"
            % (cfg.holdout, len(full)))
    split = len(full) - cfg.holdout
    return (full.subset(np.arange(split), "train"),
            full.subset(np.arange(split, len(full)), "test"))


def _cmd_train(args):
    cfg = load_config(args.config)
    if args.data_dir:
        cfg.data_dir = args.data_dir
    if args.out:
        cfg.out_dir = args.out
    os.makedirs(cfg.out_dir, exist_ok=True)
    train_ds, test_ds = _resolve_datasets(cfg)
    log.info("train: %d train / %d test images, %s", len(train_ds), len(test_ds),
             train_ds.split)
    from .backbone import build_model
    model = build_model(cfg.model, cfg.train.seed)
    log.info("model: %d parameters", model.param_count())
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    if cfg.train.epochs == 0:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(METRICS_HEADER + "\n")
    else:
        records = train(model, train_ds, test_ds, cfg.train)
        write_metrics_csv(records, metrics_path)
        if not records:
            raise DivergedError("training diverged before completing an epoch")
    weights_path = os.path.join(cfg.out_dir, "weights.eaaw")
    save_weights(model, weights_path)
    log.info("wrote %s and %s", metrics_path, weights_path)
    return EXIT_OK


def _cmd_eval(args):
    cfg = load_config(args.config)
    if args.data_dir:
        cfg.data_dir = args.data_dir
    model = load_weights(args.weights)
    _, test_ds = _resolve_datasets(cfg)
    top1, top5 = evaluate(model, test_ds, cfg.train.batch_size)
    log.info("eval: %d images from %s", len(test_ds), test_ds.split)
    print("top1=%.4f top5=%.4f" % (top1, top5))
    return EXIT_OK


def _parse_list(text, convert=str, what="value"):
    items = [part.strip() for part in text.split(",") if part.strip()]
    if not items:
        raise _UsageError("empty %s list" % what)
    try:
        return [convert(item) for item in items]
    except ValueError as exc:
        raise _UsageError("bad %s list %r: %s" % (what, text, exc)) from None


def _cmd_bench_mem(args):
    variants = _parse_list(args.variants, what="variant")
    for v in variants:
        if v not in VARIANT_NAMES:
            raise _UsageError("unknown variant %r (expected one of %s)"
                              % (v, ", ".join(VARIANT_NAMES)))
    sides = _parse_list(args.sides, int, what="side")
    report = bench_peak_memory(variants, sides, batch=args.batch,
                               budget_bytes=args.budget_mb * 2**20)
    emit_csv(report, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def _cmd_bench_latency(args):
    variants = _parse_list(args.variants, what="variant")
    for v in variants:
        if v not in VARIANT_NAMES:
            raise _UsageError("unknown variant %r (expected one of %s)"
                              % (v, ", ".join(VARIANT_NAMES)))
    report = bench_latency(variants, args.side, iters=args.iters)
    emit_csv(report, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def _cmd_selftest(args):
    from . import selftest
    failed = []
    for name, err in selftest.op_gradient_checks():
        ok = err < selftest.OP_TOLERANCE
        log.info("selftest op %-26s %.3g %s", name, err, "ok" if ok else "FAIL")
        if not ok:
            failed.append(name)
    for name, err in selftest.micro_model_checks():
        ok = err < selftest.END_TO_END_TOLERANCE
        log.info("selftest %-29s %.3g %s", name, err, "ok" if ok else "FAIL")
        if not ok:
            failed.append(name)
    for name, diff in selftest.equivalence_ladder():
        ok = diff < selftest.EQUIVALENCE_TOLERANCE
        log.info("selftest %-29s %.3g %s", name, diff, "ok" if ok else "FAIL")
        if not ok:
            failed.append(name)
    mask_failures = selftest.mask_exactness()
    log.info("selftest mask_exactness: %d failures", len(mask_failures))
    if mask_failures:
        failed.append("mask_exactness")
        for row in mask_failures[:10]:
            log.error("mask mismatch: %s", row)
    if failed:
        log.error("selftest FAILED: %s", ", ".join(failed))
        return EXIT_RUNTIME
    log.info("selftest passed")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench-mem": _cmd_bench_mem,
    "bench-latency": _cmd_bench_latency,
    "selftest": _cmd_selftest,
}


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, DataFormatError, DivergedError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
