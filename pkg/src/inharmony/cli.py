"""Command-line entry point.

Every :class:`TrainConfig` field can be set from a ``key = value`` file
(``--config``) and overridden with ``--key value`` (dashes or underscores).
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from .checkpoint import CheckpointError
from .config import TrainConfig
from .dataset import DataError
from .diffcore import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("inharmony")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # the copy attached to subcommands must not reset values given before the subcommand
    extra = {"default": argparse.SUPPRESS} if suppress else {}
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file", **extra)
    common.add_argument("--seed", type=int, help="seed of the command's randomness", **extra)
    common.add_argument("--out-dir", help="output directory", **extra)
    common.add_argument("-v", "--verbose", action="store_true", **extra)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="inharmony", description="Inharmonious region localization with adaptive color mapping.",
                     parents=[_global_options(False)])
    common = _global_options(True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic composite dataset")
    sub.add_parser("train", parents=[common], help="train and evaluate on the test split")
    for name, text in (("eval", "evaluate a checkpoint"),
                       ("discrepancy-stats", "share of images whose code distance grows after color mapping")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint directory (default: <out-dir>/checkpoint)")
        p.add_argument("--split", default="test", choices=("train", "test"))
    p = sub.add_parser("infer", parents=[common], help="predict the region mask of one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")
    p.add_argument("mask_out", help="output PGM mask")
    p.add_argument("--retouched", help="also write the color-mapped image (PPM)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operation")
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("dump-field", parents=[common], help="write the affine field and guidance map of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")
    return parser


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--"):
            raise UsageError(f"unexpected argument {flag!r}")
        key, eq, value = flag[2:].partition("=")
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"unknown option {flag!r}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"option {flag!r} needs a value")
            i += 1
            value = extra[i]
        values[key] = value
        i += 1
    return values


def resolve_config(args, extra: list[str]) -> TrainConfig:
    overrides = _parse_overrides(extra)
    if args.seed is not None:
        overrides["data_seed" if args.command == "gen-data" else "seed"] = args.seed
    if args.out_dir is not None:
        overrides["data_dir" if args.command == "gen-data" else "out_dir"] = args.out_dir
    try:
        if args.config:
            return TrainConfig.load(args.config, **overrides)
        return TrainConfig.from_mapping(overrides)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _checkpoint(args, cfg: TrainConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / harness.CHECKPOINT_DIR


def run(args, cfg: TrainConfig) -> int:
    cmd = args.command
    if cmd == "gen-data":
        manifest = harness.generate_data(cfg)
        counts = manifest.counts
        print(f"wrote {counts.get('train', 0)} train / {counts.get('test', 0)} test pairs to {cfg.data_dir}")
    elif cmd == "train":
        result = harness.train(cfg)
        print(result.metrics.to_table(), end="")
    elif cmd == "eval":
        report = harness.evaluate(cfg, _checkpoint(args, cfg), args.split)
        if args.out_dir:
            harness.write_metrics(report, args.out_dir)
        print(report.to_table(), end="")
    elif cmd == "discrepancy-stats":
        stats = harness.discrepancy_stats(cfg, _checkpoint(args, cfg), args.split)
        print(f"pct_enlarged_by_margin\t{stats.pct_enlarged_by_margin:.2f}")
        print(f"pct_enlarged\t{stats.pct_enlarged:.2f}")
        print(f"n\t{stats.n}")
        print(f"skipped\t{stats.n_skipped}")
    elif cmd == "infer":
        frac = harness.infer(args.checkpoint, args.image, args.mask_out, args.retouched)
        print(f"mask area fraction: {frac:.4f}")
    elif cmd == "gradcheck":
        summary = harness.gradcheck_all(tol=args.tol)
        print(summary.to_table(), end="")
        if not summary.passed:
            return EXIT_NUMERIC
    elif cmd == "dump-field":
        out = harness.dump_field(args.checkpoint, args.image, args.out_dir or cfg.out_dir)
        print(f"wrote field and guidance to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args, extra)
        return run(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
