"""Command line front end: ``zstci run | report | sweep``."""

import argparse
import logging
import os
import sys

from . import experiment as ex
from .errors import ConfigError, DataError, ZSTCIError

log = logging.getLogger("zstci")


def _seeds(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _names(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _common(p):
    p.add_argument("--config", help="INI config file; ZSTCI_<SECTION>_<KEY> variables override it")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 1,2,3")
    p.add_argument("--tasks", type=int, help="number of tasks in the stream")
    p.add_argument("--snapshots", action="store_true", help="save model, importance and memory snapshots")


def build_parser():
    parser = argparse.ArgumentParser(prog="zstci", description="Class-incremental embedding experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run one method over the configured seeds")
    _common(run)
    run.add_argument("--method", choices=ex.METHODS)
    run.add_argument("--zstci", choices=ex.ZSTCI_MODES)

    sweep = sub.add_parser("sweep", help="cartesian product of methods and ZSTCI modes")
    _common(sweep)
    sweep.add_argument("--methods", type=_names, default=ex.METHODS)
    sweep.add_argument("--modes", type=_names, default=ex.ZSTCI_MODES)
    sweep.add_argument("--workers", type=int)

    report = sub.add_parser("report", help="aggregate results.jsonl files into tables")
    report.add_argument("results", nargs="+", help="results.jsonl files or directories containing one")
    report.add_argument("--out", help="directory for the CSV series and summary")
    return parser


def _load(args, **overrides):
    cfg = ex.load_config(args.config)
    if args.seeds:
        overrides.setdefault("run", {})["seeds"] = args.seeds
    if args.tasks is not None:
        overrides["stream"] = {"num_tasks": args.tasks}
    return cfg.with_overrides(**overrides).validate()


def _finish(results, args, cfg):
    ex.write_results(results, args.out, cfg)
    _, text = ex.emit_report(results, args.out)
    print(text)
    failed = [r for r in results if r.status != "ok"]
    for r in failed:
        log.error("%s seed=%s failed: %s", r.label, r.seed, r.error)
    return max((r.exit_code for r in failed), default=0)


def cmd_run(args):
    overrides = {}
    if args.method:
        overrides["regularizer"] = {"method": args.method}
    if args.zstci:
        overrides["transition"] = {"zstci": args.zstci}
    cfg = _load(args, **overrides)
    snap = os.path.join(args.out, "snapshots") if (args.snapshots or cfg.run.save_snapshots) else None
    return _finish(ex.run_experiment(cfg, snapshot_dir=snap), args, cfg)


def cmd_sweep(args):
    for m in args.methods:
        if m not in ex.METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {ex.METHODS}")
    for z in args.modes:
        if z not in ex.ZSTCI_MODES:
            raise ConfigError(f"unknown zstci mode {z!r}; choose from {ex.ZSTCI_MODES}")
    cfg = _load(args)
    workers = args.workers or cfg.run.workers
    return _finish(ex.run_sweep(cfg, args.methods, args.modes, workers=workers), args, cfg)


def cmd_report(args):
    results = []
    for path in args.results:
        if os.path.isdir(path):
            path = os.path.join(path, "results.jsonl")
        if not os.path.exists(path):
            raise DataError(f"no results file at {path}")
        results.extend(ex.read_results(path))
    _, text = ex.emit_report(results, args.out)
    print(text)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return {"run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}[args.verb](args)
    except ZSTCIError as exc:
        print(f"zstci: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"zstci: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
