"""Command-line entry point: validate, run, summarize, compare, export."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .metrics import (
    IncompleteLogError,
    LogIOError,
    compare_runs,
    export_log,
    export_summary,
    import_summary,
    summarize,
)
from .scenario import SETUP_TAGS, ScenarioError, load_scenario

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4
EXIT_IO = 5


def _load(path: str):
    try:
        return load_scenario(path)
    except OSError as exc:
        raise LogIOError(f"cannot read scenario {path}: {exc.strerror or exc}") from exc


def _summary(path: str, windows: int):
    p = Path(path)
    return summarize(p, windows) if p.is_dir() else import_summary(p)


def cmd_validate(args) -> int:
    cfg = _load(args.scenario)
    print(f"ok {cfg.hash}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args.scenario)
    out = Path(args.out) if args.out else Path(cfg.scenario.output.dir) / args.setup
    result = run_experiment(cfg, args.setup, out, args.seed)
    print(f"{result.setup} seed={result.seed} log={result.directory} hash={result.content_hash}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    summary = summarize(args.log, args.windows)
    if args.out:
        fmt = args.format or ("csv" if args.out.endswith(".csv") else "json")
        export_summary(summary, fmt, args.out)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    a = _summary(args.a, args.windows)
    b = _summary(args.b, args.windows)
    report = compare_runs(a, b)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    print(f"a={report.setup_a} b={report.setup_b} (final window, delta = a - b)")
    print(f"{'slice':6} {'p50_a_ms':>10} {'p50_b_ms':>10} {'viol_a':>8} {'viol_b':>8}  latency  violations")
    for k, c in report.slices.items():
        print(f"{k:6} {c.p50_a * 1e3:10.4f} {c.p50_b * 1e3:10.4f} {c.violation_a:8.4f} {c.violation_b:8.4f}"
              f"  {c.latency_winner:7}  {c.violation_winner}")
    return EXIT_OK


def cmd_export(args) -> int:
    out = args.out or str(Path(args.log) / f"export.{args.format}")
    for path in export_log(args.log, args.format, out, args.windows):
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridslice", description="Smart-grid RAN slicing experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a scenario file and print its hash")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute one setup and write its log directory")
    p.add_argument("scenario")
    p.add_argument("--setup", required=True, choices=SETUP_TAGS)
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--out", default=None, help="log directory (default: <output.dir>/<setup>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("summarize", help="windowed latency and SLA statistics of a log")
    p.add_argument("log")
    p.add_argument("--windows", type=int, default=10)
    p.add_argument("--out", default=None, help="write the summary here instead of stdout")
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("compare", help="final-window comparison of two summaries or logs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--windows", type=int, default=10, help="used when an argument is a log directory")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="flat CSV or JSON export of a log")
    p.add_argument("log")
    p.add_argument("--format", required=True, choices=("csv", "json"))
    p.add_argument("--out", default=None)
    p.add_argument("--windows", type=int, default=100, help="windows in the CSV latency series")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except LogIOError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IncompleteLogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        # mismatched or malformed inputs are validation failures, anything else is runtime
        return EXIT_VALIDATION if args.command in ("compare", "summarize", "export") else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
