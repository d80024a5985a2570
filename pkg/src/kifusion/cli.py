"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import _backend
from .experiment import (
    ConfigError, ablation_grid, execute_all, load_config, parse_overrides, run_grid,
    write_comparison, write_resolved,
)
from .importance import write_snapshot_csv
from .metrics import ReportError, compare_runs, format_comparison, read_report
from .model import adapter_layout
from .trainer import TrainingAborted

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
INSPECT_WHAT = ("matrix", "importance", "overlap")

log = logging.getLogger("kifusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kifusion", description="Continual-learning runs with importance-masked fusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    p.add_argument("--backend", choices=("python", "cython"), help="kernel backend (default: best available)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, help_ in (("run", "train every order x seed of one config"),
                        ("ablate", "train the Cartesian product of the config's sweep axes")):
        c = sub.add_parser(name, help=help_,
                           epilog="Any further --dotted.key value pairs override config entries.")
        c.add_argument("config", help="YAML experiment config")
        c.add_argument("--out", help="output directory (overrides the config's 'out')")
        c.add_argument("--dump-masks", action="store_true", help="write every cycle's binary masks under OUT/masks/")

    c = sub.add_parser("inspect", help="show one field of a run report")
    c.add_argument("report", help="report JSON written by run/ablate")
    c.add_argument("what", choices=INSPECT_WHAT)
    c.add_argument("--cycle", type=int, help="importance: snapshot cycle (default: all)")
    c.add_argument("--out", help="importance: directory for snapshot CSVs")

    c = sub.add_parser("compare", help="OP/BWT table over reports")
    c.add_argument("reports", nargs="+", help="report files or directories holding them")
    c.add_argument("--csv", help="also write the table as CSV")
    return p


def _out_dir(args, exp) -> Path:
    out = args.out or exp.out
    if not out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train(args, extra, grid_fn) -> int:
    exp = load_config(args.config, parse_overrides(extra))
    out = _out_dir(args, exp)
    specs = grid_fn(exp)
    write_resolved(exp, out)
    reports_dir = out / "reports"
    reports_dir.mkdir(exist_ok=True)
    log.info("%d runs -> %s", len(specs), reports_dir)
    reports = execute_all(exp, specs, reports_dir, out / "masks" if args.dump_masks else None)
    for spec, r in zip(specs, reports):
        print(f"{spec.label:<32} {spec.order_id} seed {spec.seed}: OP {100 * r.op:6.2f}  BWT {100 * r.bwt:7.2f}"
              f"  fusions/task {r.fusions_per_task[-1] if r.fusions_per_task else 0}")
    print()
    print(write_comparison(reports, out))
    return EXIT_OK


def cmd_run(args, extra) -> int:
    return _train(args, extra, run_grid)


def cmd_ablate(args, extra) -> int:
    return _train(args, extra, ablation_grid)


def _layout_for(report):
    s, c = report.stream, report.config
    try:
        widths = [int(s["input_dim"]), *c["hidden_dims"], int(s["num_classes"])]
        return adapter_layout(widths, int(c["rank"]))
    except KeyError as exc:
        raise ReportError(f"report lacks {exc} needed to rebuild the parameter layout") from None


def cmd_inspect(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    report = read_report(args.report)
    if args.what == "matrix":
        print(report.matrix.render())
        if report.bwt_defined:
            print(f"\nOP {100 * report.op:.2f}  BWT {100 * report.bwt:.2f}")
        if report.aborted:
            print(f"aborted: {report.aborted}")
        return EXIT_OK
    if args.what == "overlap":
        rows = [e for e in report.cycle_log if "shared" in e]
        if not rows:
            print("no mask statistics in this report (method without binary masks)")
            return EXIT_OK
        print(f"{'task':>4} {'cycle':>7} {'shared':>7} {'in_only':>7} {'out_only':>8}")
        for e in rows:
            print(f"{e['task']:>4} {e['cycle']:>7} {e['shared']:>7} {e['in_only']:>7} {e['out_only']:>8}")
        return EXIT_OK
    # importance
    cycles = report.snapshot_cycles()
    if not cycles:
        raise ReportError("report has no importance snapshots (set train.snapshot_cycles)")
    snaps = report.snapshots
    if args.cycle is not None:
        snaps = [s for s in snaps if s["cycle"] == args.cycle]
        if not snaps:
            raise ReportError(f"no snapshot at cycle {args.cycle}; available cycles: {', '.join(map(str, cycles))}")
    layout = _layout_for(report)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for snap in snaps:
        inner, outer = np.asarray(snap["inner"]), np.asarray(snap["outer"])
        if out is None:
            print(f"cycle {snap['cycle']} ({snap['kind']}, task {snap['task']}): "
                  f"inner sum {inner.sum():.6g}  outer sum {outer.sum():.6g}")
        else:
            path = out / f"importance_cycle{snap['cycle']:06d}_{snap['kind']}.csv"
            write_snapshot_csv(inner, outer, layout, path)
            print(path)
    return EXIT_OK


def cmd_compare(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    paths = []
    for p in map(Path, args.reports):
        paths.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    if not paths:
        raise ReportError("no report files found")
    rows = compare_runs([read_report(p) for p in paths])
    print(format_comparison(rows))
    if args.csv:
        from .metrics import comparison_csv
        Path(args.csv).write_text(comparison_csv(rows))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "inspect": cmd_inspect, "compare": cmd_compare}


def main(argv=None) -> int:
    try:
        args, extra = _parser().parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.backend:
            _backend.use(args.backend)
        return COMMANDS[args.command](args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ReportError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
