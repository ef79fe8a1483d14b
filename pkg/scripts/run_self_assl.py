#!/usr/bin/env python3
"""Self-aggregation with the complement loss.

For each seed: pretrain a frozen reference on the proxy task, then train
a fresh backbone on the same task twice — once plainly (alpha = 0) and
once with the negative-LCKA complement term pushing it away from the
reference (alpha = 1). Reports probe-set similarity to the reference and
fine-tuned target accuracy for both runs.
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
                    / "configs" / "self_assl.ini"),
        help="experiment config (default: configs/self_assl.ini)",
    )
    args = parser.parse_args()
    manifest = run_experiment(args.config)
    print(emit_report(manifest), end="")


if __name__ == "__main__":
    main()
