#!/usr/bin/env python3
"""Greedy multi-task aggregation over the synthetic dataset.

Ranks every proxy task by fine-tuned accuracy, then repeatedly pulls in
the candidate least similar (by LCKA) to the current aggregate, keeping
it only if the fine-tuned accuracy does not drop. Prints the selection
trace and the final pool.
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
                    / "configs" / "mt_assl.ini"),
        help="experiment config (default: configs/mt_assl.ini)",
    )
    args = parser.parse_args()
    manifest = run_experiment(args.config)
    print(emit_report(manifest), end="")


if __name__ == "__main__":
    main()
