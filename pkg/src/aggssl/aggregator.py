"""Greedy multi-task aggregation: initial per-task ranking, lowest-LCKA
candidate selection, joint retraining per iteration, and the stop-on-no-gain
rule — plus a pure replay mode that runs the identical selection logic over
externally supplied similarity and accuracy tables.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .cka import FeatureMatrix, lcka
from .data import ProxyTaskSpec, SyntheticDataset
from .trainer import (
    TrainerConfig,
    TrainedModel,
    evaluate_acc,
    extract_features,
    finetune_target,
    pretrain_proxy,
    train_multitask,
)


@dataclass
class IterationRecord:
    iteration: int
    similarities: dict[str, float]
    selected_task: str
    post_training_acc: float
    accepted: bool


@dataclass
class AggregationState:
    pool_a: list[str]
    pool_p: list[str]
    snapshots: dict[str, TrainedModel] = field(default_factory=dict)
    current_model: TrainedModel | None = None
    best_acc: float = 0.0
    trace: list[IterationRecord] = field(default_factory=list)


def _argmin_by_value(scores: dict[str, float]) -> str:
    # ties break lexicographically by task id
    return min(scores, key=lambda k: (scores[k], k))


def _argmax_by_value(scores: dict[str, float]) -> str:
    return min(scores, key=lambda k: (-scores[k], k))


def initial_ranking(
    tasks: list[ProxyTaskSpec], ds: SyntheticDataset, cfg: TrainerConfig,
) -> tuple[str, dict[str, TrainedModel], dict[str, float]]:
    """Pretrain, fine-tune and evaluate every candidate; the winner seeds the
    aggregation pool. The pre-fine-tune snapshots are frozen and kept for
    similarity computation."""
    if len(tasks) < 1:
        raise ValueError("need at least one candidate task")
    snapshots: dict[str, TrainedModel] = {}
    accs: dict[str, float] = {}
    for task in sorted(tasks, key=lambda t: t.task_id):
        try:
            pretrained = pretrain_proxy(task, ds, cfg)
            snapshots[task.task_id] = pretrained.clone_unfrozen().freeze()
            tuned = finetune_target(pretrained, ds, cfg)
            accs[task.task_id] = evaluate_acc(tuned, ds)
        except Exception as exc:
            raise RuntimeError(f"initial ranking failed for task "
                               f"'{task.task_id}'") from exc
    return _argmax_by_value(accs), snapshots, accs


def select_next(
    state: AggregationState,
    current_features: FeatureMatrix,
    candidate_features: dict[str, FeatureMatrix],
) -> tuple[str, dict[str, float]]:
    if not state.pool_p:
        raise ValueError("candidate pool is empty")
    similarities = {}
    for task_id in state.pool_p:
        try:
            similarities[task_id] = lcka(current_features, candidate_features[task_id])
        except ValueError as exc:
            raise ValueError(f"similarity failed for candidate "
                             f"'{task_id}': {exc}") from exc
    return _argmin_by_value(similarities), similarities


def run_mt_assl(
    tasks: list[ProxyTaskSpec],
    ds: SyntheticDataset,
    cfg: TrainerConfig,
    similarity_after_finetune: bool = False,
) -> tuple[AggregationState, TrainedModel]:
    """Full greedy loop. By default the aggregate features used for
    similarity come from the multi-task backbone before target fine-tuning;
    ``similarity_after_finetune`` switches to the fine-tuned backbone."""
    if len(tasks) < 1:
        raise ValueError("need at least one task")
    by_id = {t.task_id: t for t in tasks}
    probe = ds.split_images("probe")

    p_hat, snapshots, accs = initial_ranking(tasks, ds, cfg)
    state = AggregationState(
        pool_a=[p_hat],
        pool_p=sorted(t for t in by_id if t != p_hat),
        snapshots=snapshots,
        best_acc=accs[p_hat],
    )
    state.trace.append(IterationRecord(1, {}, p_hat, accs[p_hat], True))

    current = snapshots[p_hat].clone_unfrozen()
    best_model = finetune_target(current, ds, cfg)
    candidate_features = {
        tid: extract_features(snap, probe, tap=cfg.feature_tap, tag=tid)
        for tid, snap in snapshots.items()
    }

    similarity_model = best_model if similarity_after_finetune else current
    iteration = 1
    while state.pool_p:
        iteration += 1
        agg_tag = "+".join(state.pool_a)
        current_features = extract_features(
            similarity_model, probe, tap=cfg.feature_tap, tag=agg_tag)
        selected, similarities = select_next(state, current_features,
                                             candidate_features)
        state.pool_p.remove(selected)
        trial_pool = state.pool_a + [selected]
        trial_model = train_multitask([by_id[t] for t in trial_pool], ds, cfg)
        tuned = finetune_target(trial_model, ds, cfg)
        acc = evaluate_acc(tuned, ds)
        accepted = acc >= state.best_acc
        state.trace.append(IterationRecord(iteration, similarities, selected,
                                           acc, accepted))
        if not accepted:
            break
        state.pool_a = trial_pool
        state.best_acc = acc
        best_model = tuned
        similarity_model = tuned if similarity_after_finetune else trial_model

    state.current_model = best_model
    return state, best_model


# ---------------------------------------------------------------------------
# replay mode: identical selection/stopping logic over published tables


def replay_selection(
    initial_accs: dict[str, float],
    similarity_tables: dict[int, dict[str, float]],
    acc_tables: dict[int, dict[str, float]],
) -> AggregationState:
    """Run the selector with training replaced by table lookup.

    ``similarity_tables[i]`` and ``acc_tables[i]`` hold, for iteration i
    (first aggregation iteration = 2), the candidate similarities to the
    current aggregate and the accuracy reached after integrating each
    candidate.
    """
    if len(initial_accs) < 1:
        raise ValueError("need initial accuracies")
    p_hat = _argmax_by_value(initial_accs)
    state = AggregationState(
        pool_a=[p_hat],
        pool_p=sorted(t for t in initial_accs if t != p_hat),
        best_acc=initial_accs[p_hat],
    )
    state.trace.append(IterationRecord(1, {}, p_hat, initial_accs[p_hat], True))

    iteration = 1
    while state.pool_p:
        iteration += 1
        sims = similarity_tables.get(iteration)
        if sims is None:
            break  # table exhausted: nothing more to replay
        sims = {t: sims[t] for t in state.pool_p}
        selected = _argmin_by_value(sims)
        accs = acc_tables.get(iteration, {})
        if selected not in accs:
            raise ValueError(f"fixture has no accuracy entry for selected "
                             f"task '{selected}' at iteration {iteration}")
        acc = accs[selected]
        state.pool_p.remove(selected)
        accepted = acc >= state.best_acc
        state.trace.append(IterationRecord(iteration, sims, selected, acc, accepted))
        if not accepted:
            break
        state.pool_a.append(selected)
        state.best_acc = acc
    return state


# ---------------------------------------------------------------------------
# trace / fixture files


def write_trace_csv(path, trace: list[IterationRecord]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "pool_a", "similarities", "selected",
                         "acc", "accepted"])
        pool: list[str] = []
        for rec in trace:
            sims = ";".join(f"{k}:{v:.17g}" for k, v in sorted(rec.similarities.items()))
            if rec.accepted:
                pool = pool + [rec.selected_task]
            writer.writerow([rec.iteration, "+".join(pool), sims,
                             rec.selected_task, f"{rec.post_training_acc:.17g}",
                             int(rec.accepted)])


def load_replay_fixture(path) -> tuple[dict, dict, dict]:
    """Fixture CSV rows: ``initial,task,acc`` / ``similarity,iter,task,value``
    / ``acc,iter,task,value``."""
    initial: dict[str, float] = {}
    sims: dict[int, dict[str, float]] = {}
    accs: dict[int, dict[str, float]] = {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].startswith("#"):
                continue
            kind = row[0].strip()
            if kind == "initial":
                initial[row[1].strip()] = float(row[2])
            elif kind == "similarity":
                sims.setdefault(int(row[1]), {})[row[2].strip()] = float(row[3])
            elif kind == "acc":
                accs.setdefault(int(row[1]), {})[row[2].strip()] = float(row[3])
            else:
                raise ValueError(f"unknown fixture row kind '{kind}'")
    return initial, sims, accs
