"""Command line entry point.

    blip run <config.json>
    blip sweep-f0 <config.json> --f0 1e-14,5e-16,...
    blip inspect <report_dir> acc|bwt|matrix|config|frozen_hist <task>

Exit codes: 0 success, 1 run failure (partial reports kept), 2 bad config
or query.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from blip.config import F0_GRID, ConfigError, load_config
from blip.metrics import dumps, read_report

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")


def cmd_run(config_path) -> int:
    from blip.runner import run_seeds

    try:
        config = load_config(config_path)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    summary = run_seeds(config)
    if summary["failed"]:
        print(f"{summary['failed']} run(s) failed; partial reports in {config.out_dir}", file=sys.stderr)
        return EXIT_FAILED
    print(f"acc {summary['acc_mean']:.4f} +- {summary['acc_std']:.4f}  "
          f"bwt {summary['bwt_mean']:.4f} +- {summary['bwt_std']:.4f}")
    return EXIT_OK


def _parse_f0(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("--f0", f"not a comma-separated list of numbers: {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise ConfigError("--f0", "values must be positive")
    return values


def cmd_sweep_f0(config_path, f0_list) -> int:
    from blip.runner import sweep_f0

    try:
        config = load_config(config_path)
        values = _parse_f0(f0_list) if isinstance(f0_list, str) else list(f0_list)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rows = sweep_f0(config, values)
    print((Path(config.out_dir) / "f0_sweep.csv").read_text(), end="")
    return EXIT_FAILED if any(r["failed"] for r in rows) else EXIT_OK


def _fmt(x) -> str:
    return "null" if x is None else repr(float(x))


def cmd_inspect(report_path, query: list[str] | str, out=None) -> int:
    out = out or sys.stdout
    words = query.split() if isinstance(query, str) else list(query)
    try:
        data = read_report(report_path)
    except FileNotFoundError:
        print(f"no report at {report_path}", file=sys.stderr)
        return EXIT_USAGE
    head = words[0] if words else ""
    if head == "acc" and len(words) == 1:
        print(_fmt(data["acc"]), file=out)
    elif head == "bwt" and len(words) == 1:
        print(_fmt(data["bwt"]), file=out)
    elif head == "matrix" and len(words) == 1:
        base = Path(report_path)
        base = base if base.is_dir() else base.parent
        print((base / "accuracy_matrix.csv").read_text(), end="", file=out)
    elif head == "config" and len(words) == 1:
        print(dumps(data["config"]), file=out)
    elif head == "frozen_hist" and len(words) == 2 and words[1].isdigit():
        t = int(words[1])
        if not 1 <= t <= len(data["tasks"]):
            print(f"no task {t} in report", file=sys.stderr)
            return EXIT_USAGE
        hist = data["tasks"][t - 1]["frozen_histogram"]
        print("layer," + ",".join(str(b) for b in range(data["total_bits"] + 1)), file=out)
        for name in sorted(hist, key=lambda n: [l["name"] for l in data["layers"]].index(n)):
            print(name + "," + ",".join(str(c) for c in hist[name]), file=out)
    else:
        print(f"unknown query {' '.join(words)!r}; expected acc, bwt, matrix, config or frozen_hist <task>",
              file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blip", description=__doc__.split("\n")[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch progress")
    # also accepted after the subcommand; SUPPRESS keeps it from resetting the top-level flag
    quiet = argparse.ArgumentParser(add_help=False)
    quiet.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                       help="suppress per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[quiet], help="run every seed of a config")
    p.add_argument("config")
    p = sub.add_parser("sweep-f0", parents=[quiet], help="repeat a config over prior Fisher values")
    p.add_argument("config")
    p.add_argument("--f0", default=",".join(f"{v:g}" for v in F0_GRID),
                   help="comma-separated values (default: %(default)s)")
    p = sub.add_parser("inspect", help="print part of a saved report")
    p.add_argument("report_dir")
    p.add_argument("query", nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(not args.quiet)
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "sweep-f0":
            return cmd_sweep_f0(args.config, args.f0)
        return cmd_inspect(args.report_dir, args.query)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
