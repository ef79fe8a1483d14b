"""Command-line entry point: run / replay / report / verify.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .aggregator import load_replay_fixture, replay_selection, write_trace_csv
from .harness import ConfigError, emit_report, load_manifest, run_experiment, verify_manifest


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aggssl",
        description="Aggregative self-supervised learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("config", help="ini-style experiment config")

    replay = sub.add_parser("replay", help="replay a selection trace fixture")
    replay.add_argument("fixture", help="replay fixture CSV")
    replay.add_argument("--trace-out", default=None,
                        help="optional path for the trace CSV")

    report = sub.add_parser("report", help="print a human-readable summary")
    report.add_argument("manifest", help="manifest.json of a finished run")

    verify = sub.add_parser("verify", help="check manifest file hashes")
    verify.add_argument("manifest", help="manifest.json of a finished run")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            manifest = run_experiment(args.config)
            print(emit_report(manifest), end="")
            return 0
        if args.command == "replay":
            initial, sims, accs = load_replay_fixture(args.fixture)
            state = replay_selection(initial, sims, accs)
            for rec in state.trace:
                verdict = "accept" if rec.accepted else "reject"
                print(f"iter {rec.iteration}: {verdict} {rec.selected_task} "
                      f"(acc {rec.post_training_acc:g})")
            print(f"final pool: {' + '.join(state.pool_a)}  "
                  f"best acc: {state.best_acc:g}")
            if args.trace_out:
                write_trace_csv(Path(args.trace_out), state.trace)
            return 0
        if args.command == "report":
            print(emit_report(load_manifest(args.manifest)), end="")
            return 0
        if args.command == "verify":
            problems = verify_manifest(args.manifest)
            for p in problems:
                print(p, file=sys.stderr)
            return 0 if not problems else 2
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
