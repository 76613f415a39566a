"""Command-line front end: ``clipgrain {gradcheck,train,exposure,sweep}``.

Exit codes: 0 success, 1 configuration error, 2 gradient check failure,
3 training failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .clipping import ClippingPolicy
from .config import load_config
from .errors import ClipGrainError, ConfigError, DatasetFormatError, TrainingAbort

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_GRADCHECK = 2
EXIT_TRAINING = 3

log = logging.getLogger("clipgrain")


def _parse_bounds(text: str) -> list:
    try:
        return [float(b) for b in text.split(",") if b.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad bound list {text!r}", "--bounds") from exc


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which is our gradcheck code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML experiment config")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    common.add_argument("--seeds", metavar="LIST", help="comma-separated seeds, e.g. 1,2,3")
    common.add_argument("--parallel", type=int, default=1, metavar="N",
                        help="worker processes for independent runs")
    common.add_argument("--force", action="store_true",
                        help="write into a non-empty output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        dest="overrides", help="override a config value, e.g. train.iterations=100")
    common.add_argument("--policies", metavar="TAGS",
                        help="comma-separated policy tags, e.g. none,per_core@2.5,adaptive")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(
        prog="clipgrain",
        description="Per-core gradient clipping simulator and memorization audit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gradcheck", parents=[common],
                   help="check analytic gradients against finite differences")
    sub.add_parser("train", parents=[common], help="train every (policy, seed) pair")
    sub.add_parser("exposure", parents=[common], help="run the canary exposure audit")
    sweep = sub.add_parser("sweep", parents=[common],
                           help="grid-search the per-core clipping bound")
    sweep.add_argument("--bounds", metavar="LIST", help="comma-separated bounds")
    return parser


def _load(args):
    overrides = list(args.overrides)
    cfg = load_config(args.config, overrides=overrides, seeds=args.seeds, out=args.out)
    if args.policies:
        cfg.policies = [ClippingPolicy.parse(t) for t in args.policies.split(",") if t.strip()]
        for p in cfg.policies:
            p.validate_for(cfg.train.per_core_batch)
    return cfg


def cmd_gradcheck(args) -> int:
    from .runner import prepare_out, run_gradcheck

    cfg = _load(args)
    out = prepare_out(cfg.out, args.force) if args.out or args.config else None
    rows = run_gradcheck(cfg, out=out)
    print(f"{'model':<10} {'draws':>6} {'max_rel_error':>15}  status")
    for r in rows:
        print(f"{r.kind:<10} {r.draws:>6} {r.max_rel_error:>15.3e}  {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_GRADCHECK


def cmd_train(args) -> int:
    from .runner import run_train

    cfg = _load(args)
    results = run_train(cfg, force=args.force, parallel=args.parallel)
    for r in results:
        print(f"{r.policy:<24} seed={r.seed:<6} train={r.train_metric:.4f} "
              f"test={r.test_metric:.4f} gap={r.gap:.4f}")
    print(f"wrote {len(results)} trajectories under {cfg.out}")
    return EXIT_OK


def cmd_exposure(args) -> int:
    from .runner import run_exposure

    cfg = _load(args)
    report = run_exposure(cfg, force=args.force, parallel=args.parallel)
    print(report.to_table(), end="")
    print(f"wrote exposure report under {cfg.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .runner import run_sweep

    cfg = _load(args)
    bounds = _parse_bounds(args.bounds) if args.bounds is not None else None
    result = run_sweep(cfg, bounds, force=args.force, parallel=args.parallel)
    for tag, v in sorted(result.mean_test.items(), key=lambda kv: kv[1]):
        mark = "  <- selected" if tag == ClippingPolicy.per_core(result.selected_bound).tag else ""
        print(f"{tag:<24} mean test metric {v:.5f}{mark}")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "exposure": cmd_exposure,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.parallel < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        where = f" (policy {exc.policy}, step {exc.step}, core {exc.core})"
        print(f"training aborted: {exc}{where}", file=sys.stderr)
        return EXIT_TRAINING
    except ClipGrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
