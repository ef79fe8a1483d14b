#!/usr/bin/env python3
"""Pairwise complementarity sweep over the proxy-task pool.

Pretrains every listed task on its own, then every pair jointly, and
reports Int/Avg/Max accuracies plus the LCKA similarity between the
single-task representations. Low-similarity pairs are the ones expected
to aggregate well.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from aggssl.harness import emit_report, run_experiment  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--config",
        default=str(Path(__file__).resolve().parent.parent
                    / "configs" / "pairwise.ini"),
        help="experiment config (default: configs/pairwise.ini)",
    )
    args = parser.parse_args()
    manifest = run_experiment(args.config)
    print(emit_report(manifest), end="")


if __name__ == "__main__":
    main()
