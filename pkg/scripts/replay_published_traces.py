#!/usr/bin/env python3
"""Replay the published greedy-selection traces through the selector.

Runs the exact selection and stopping logic over the bundled similarity
and accuracy tables for the STL10 and brain-hemorrhage task pools, and
prints each decision. No training happens; this checks the algorithm's
decision path against the published numbers.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from aggssl.aggregator import load_replay_fixture, replay_selection  # noqa: E402

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def replay(name: str):
    print(f"== {name} ==")
    initial, sims, accs = load_replay_fixture(FIXTURES / name)
    state = replay_selection(initial, sims, accs)
    for rec in state.trace:
        verdict = "accept" if rec.accepted else "reject"
        print(f"  iter {rec.iteration}: {verdict} {rec.selected_task} "
              f"(acc {rec.post_training_acc:g})")
    print(f"  final pool: {' + '.join(state.pool_a)}  "
          f"best acc: {state.best_acc:g}\n")


def main():
    replay("replay_stl10.csv")
    replay("replay_brain.csv")


if __name__ == "__main__":
    main()
