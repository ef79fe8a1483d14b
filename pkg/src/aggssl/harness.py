"""Config-driven experiment orchestration and run manifests.

Configs are plain ini-style ``key = value`` files. Every run writes its
outputs under one directory, hashes them, and lands a JSON manifest last
(atomically, via rename), so a manifest that exists always describes a
complete run.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregator import (
    load_replay_fixture,
    replay_selection,
    run_mt_assl,
    write_trace_csv,
)
from .cka import lcka
from .data import SyntheticDataset, generate_dataset, standard_task_pool
from .trainer import (
    TrainerConfig,
    derive_seed,
    evaluate_acc,
    extract_features,
    finetune_target,
    pretrain_proxy,
    train_multitask,
    train_self_aggregative,
    write_metrics_csv,
)

ARTIFACT_VERSION = "0.1.0"
OUTPUT_ROOT_ENV = "AGGSSL_OUTPUT_ROOT"

EXPERIMENT_KINDS = ("baseline", "pairwise", "mt_assl", "self_assl",
                    "replay", "label_sweep")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    output_dir: Path
    n_images: int = 1024
    dataset_seed: int = 0
    split_sizes: dict[str, int] | None = None
    tasks: list[str] = field(default_factory=list)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    label_fractions: list[float] = field(default_factory=list)
    n_seeds: int = 1
    fixture: str | None = None

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        try:
            exp = parser["experiment"]
            kind = exp.get("kind", "")
            if kind not in EXPERIMENT_KINDS:
                raise ConfigError(f"experiment.kind must be one of "
                                  f"{EXPERIMENT_KINDS}, got '{kind}'")
            out_root = os.environ.get(OUTPUT_ROOT_ENV)
            output_dir = Path(exp.get("output_dir", "runs/run"))
            if out_root:
                output_dir = Path(out_root) / output_dir.name
            cfg = cls(kind=kind, output_dir=output_dir)
            cfg.n_seeds = exp.getint("n_seeds", 1)
            cfg.fixture = exp.get("fixture", None)

            if parser.has_section("dataset"):
                d = parser["dataset"]
                cfg.dataset_seed = d.getint("seed", 0)
                names = ("pretrain", "train", "test", "probe")
                if all(d.get(n) for n in names):
                    cfg.split_sizes = {n: d.getint(n) for n in names}
                    cfg.n_images = sum(cfg.split_sizes.values())
                else:
                    cfg.n_images = d.getint("n_images", 1024)

            if parser.has_section("tasks"):
                raw = parser["tasks"].get("tasks", "")
                cfg.tasks = [t.strip() for t in raw.split(",") if t.strip()]

            if parser.has_section("trainer"):
                t = parser["trainer"]
                defaults = TrainerConfig()
                widths = [int(x) for x in t.get("layer_widths", "").split(",")
                          if x.strip()] or defaults.layer_widths
                cfg.trainer = TrainerConfig(
                    epochs_proxy=t.getint("epochs_proxy", defaults.epochs_proxy),
                    epochs_finetune=t.getint("epochs_finetune", defaults.epochs_finetune),
                    epochs_selfagg=t.getint("epochs_selfagg", defaults.epochs_selfagg),
                    batch_size=t.getint("batch_size", defaults.batch_size),
                    lr_proxy=t.getfloat("lr_proxy", defaults.lr_proxy),
                    lr_finetune=t.getfloat("lr_finetune", defaults.lr_finetune),
                    complement_weight=t.getfloat("complement_weight",
                                                 defaults.complement_weight),
                    layer_widths=widths,
                    seed=t.getint("seed", 0),
                )

            if parser.has_section("label_sweep"):
                raw = parser["label_sweep"].get("fractions", "")
                cfg.label_fractions = sorted(
                    float(x) for x in raw.split(",") if x.strip())
                for f in cfg.label_fractions:
                    if not 0.0 < f <= 1.0:
                        raise ConfigError(f"label fraction {f} outside (0, 1]")
        except (configparser.Error, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self):
        if self.kind in ("baseline", "pairwise", "mt_assl", "self_assl",
                         "label_sweep") and not self.tasks:
            raise ConfigError(f"experiment kind '{self.kind}' needs a task list")
        if self.kind == "pairwise" and len(self.tasks) < 2:
            raise ConfigError("pairwise needs at least two tasks")
        if self.kind == "replay" and not self.fixture:
            raise ConfigError("replay needs experiment.fixture")
        if self.kind == "label_sweep" and not self.label_fractions:
            raise ConfigError("label_sweep needs label_sweep.fractions")
        pool = standard_task_pool()
        for t in self.tasks:
            if t not in pool:
                raise ConfigError(f"unknown task '{t}' (known: {sorted(pool)})")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "output_dir": str(self.output_dir),
            "n_images": self.n_images,
            "dataset_seed": self.dataset_seed,
            "split_sizes": self.split_sizes,
            "tasks": self.tasks,
            "trainer": vars(self.trainer).copy(),
            "label_fractions": self.label_fractions,
            "n_seeds": self.n_seeds,
            "fixture": self.fixture,
        }


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(cfg: ExperimentConfig, metrics: dict, files: list[Path],
                    timings: dict, status: str = "ok") -> dict:
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "status": status,
        "config": cfg.to_dict(),
        "metrics": metrics,
        "files": {str(p.relative_to(cfg.output_dir)): _sha256_file(p)
                  for p in files},
        "timings": timings,
    }
    path = cfg.output_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return manifest


def _dataset_for(cfg: ExperimentConfig) -> SyntheticDataset:
    return generate_dataset(cfg.n_images, cfg.dataset_seed, cfg.split_sizes)


def _seeded(trainer: TrainerConfig, seed: int) -> TrainerConfig:
    out = TrainerConfig(**vars(trainer))
    out.seed = seed
    return out


# ---------------------------------------------------------------------------
# experiment kinds


def run_baseline(cfg: ExperimentConfig, ds: SyntheticDataset,
                 files: list[Path]) -> dict:
    pool = standard_task_pool()
    accs = {}
    for task_id in cfg.tasks:
        model = pretrain_proxy(pool[task_id], ds, cfg.trainer)
        tuned = finetune_target(model, ds, cfg.trainer)
        accs[task_id] = evaluate_acc(tuned, ds)
        out = cfg.output_dir / f"metrics_{task_id}.csv"
        write_metrics_csv(out, tuned)
        files.append(out)
    return {"accuracy": accs}


def run_pairwise(cfg: ExperimentConfig, ds: SyntheticDataset,
                 files: list[Path]) -> dict:
    pool = standard_task_pool()
    probe = ds.split_images("probe")
    singles = {}
    features = {}
    for task_id in cfg.tasks:
        model = pretrain_proxy(pool[task_id], ds, cfg.trainer)
        features[task_id] = extract_features(model, probe,
                                             tap=cfg.trainer.feature_tap,
                                             tag=task_id)
        singles[task_id] = evaluate_acc(finetune_target(model, ds, cfg.trainer), ds)

    rows = []
    for i, a1 in enumerate(cfg.tasks):
        for a2 in cfg.tasks[i + 1:]:
            if a1 == a2:
                raise ConfigError(f"pair ({a1}, {a2}) is degenerate")
            joint = train_multitask([pool[a1], pool[a2]], ds, cfg.trainer)
            int_acc = evaluate_acc(finetune_target(joint, ds, cfg.trainer), ds)
            avg_acc = (singles[a1] + singles[a2]) / 2.0
            max_acc = max(singles[a1], singles[a2])
            rows.append({
                "a1": a1, "a2": a2,
                "similarity": lcka(features[a1], features[a2]),
                "avg_acc": avg_acc, "max_acc": max_acc, "int_acc": int_acc,
                "avg_delta": int_acc - avg_acc, "max_delta": int_acc - max_acc,
            })
    out = cfg.output_dir / "pairwise.csv"
    with open(out, "w") as f:
        cols = ["a1", "a2", "similarity", "avg_acc", "max_acc", "int_acc",
                "avg_delta", "max_delta"]
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(
                row[c] if isinstance(row[c], str) else f"{row[c]:.17g}"
                for c in cols) + "\n")
    files.append(out)
    return {"singles": singles, "pairs": rows}


def run_mt_assl_experiment(cfg: ExperimentConfig, ds: SyntheticDataset,
                           files: list[Path]) -> dict:
    pool = standard_task_pool()
    state, _model = run_mt_assl([pool[t] for t in cfg.tasks], ds, cfg.trainer)
    out = cfg.output_dir / "trace.csv"
    write_trace_csv(out, state.trace)
    files.append(out)
    return {
        "final_pool": state.pool_a,
        "best_acc": state.best_acc,
        "trace": [
            {"iteration": r.iteration, "selected": r.selected_task,
             "acc": r.post_training_acc, "accepted": r.accepted,
             "similarities": r.similarities}
            for r in state.trace
        ],
    }


def run_self_assl(cfg: ExperimentConfig, ds: SyntheticDataset,
                  files: list[Path]) -> dict:
    pool = standard_task_pool()
    task = pool[cfg.tasks[0]]
    probe = ds.split_images("probe")
    per_seed = []
    for k in range(cfg.n_seeds):
        ref_cfg = _seeded(cfg.trainer, derive_seed(cfg.trainer.seed, "ref", k))
        ref = pretrain_proxy(task, ds, ref_cfg)
        ref_acc = evaluate_acc(finetune_target(ref, ds, ref_cfg), ds)
        ref.freeze()
        ref_features = extract_features(ref, probe, tap=cfg.trainer.feature_tap,
                                        tag="reference")

        run_cfg = _seeded(cfg.trainer, derive_seed(cfg.trainer.seed, "selfagg", k))
        base_cfg = _seeded(run_cfg, run_cfg.seed)
        base_cfg.complement_weight = 0.0

        baseline = train_self_aggregative(task, ref, ds, base_cfg)
        selfagg = train_self_aggregative(task, ref, ds, run_cfg)
        ref.verify_frozen()

        s_base = lcka(extract_features(baseline, probe,
                                       tap=cfg.trainer.feature_tap, tag="base"),
                      ref_features)
        s_self = lcka(extract_features(selfagg, probe,
                                       tap=cfg.trainer.feature_tap, tag="self"),
                      ref_features)
        acc_base = evaluate_acc(finetune_target(baseline, ds, base_cfg), ds)
        acc_self = evaluate_acc(finetune_target(selfagg, ds, run_cfg), ds)
        per_seed.append({
            "seed_index": k, "ref_acc": ref_acc,
            "similarity_alpha0": s_base, "similarity_alpha1": s_self,
            "acc_alpha0": acc_base, "acc_alpha1": acc_self,
        })
    out = cfg.output_dir / "self_assl.csv"
    with open(out, "w") as f:
        cols = ["seed_index", "ref_acc", "similarity_alpha0", "similarity_alpha1",
                "acc_alpha0", "acc_alpha1"]
        f.write(",".join(cols) + "\n")
        for row in per_seed:
            f.write(",".join(f"{row[c]:.17g}" for c in cols) + "\n")
    files.append(out)
    mean = lambda key: float(np.mean([r[key] for r in per_seed]))  # noqa: E731
    return {
        "per_seed": per_seed,
        "mean_similarity_alpha0": mean("similarity_alpha0"),
        "mean_similarity_alpha1": mean("similarity_alpha1"),
        "mean_acc_alpha0": mean("acc_alpha0"),
        "mean_acc_alpha1": mean("acc_alpha1"),
    }


def subsample_train_split(ds: SyntheticDataset, fraction: float,
                          seed: int) -> SyntheticDataset:
    """Class-balanced seeded subsample of the labeled-train split."""
    idx = ds.splits["train"]
    labels = ds.target_label[idx]
    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(labels):
        members = idx[labels == cls]
        k = int(round(fraction * len(members)))
        if k < 1:
            raise ValueError(f"fraction {fraction} leaves no samples "
                             f"for class {cls}")
        keep.append(rng.choice(members, size=k, replace=False))
    new_splits = dict(ds.splits)
    new_splits["train"] = np.sort(np.concatenate(keep))
    return SyntheticDataset(ds.images, ds.shape_id, ds.color_id,
                            new_splits, ds.seed)


def run_label_sweep(cfg: ExperimentConfig, ds: SyntheticDataset,
                    files: list[Path]) -> dict:
    pool = standard_task_pool()
    tasks = [pool[t] for t in cfg.tasks]
    method = "+".join(cfg.tasks)
    rows = []
    for fraction in cfg.label_fractions:
        for k in range(cfg.n_seeds):
            run_cfg = _seeded(cfg.trainer, derive_seed(cfg.trainer.seed, "sweep", k))
            sub = ds if fraction == 1.0 else subsample_train_split(
                ds, fraction, derive_seed(cfg.dataset_seed, "subsample", fraction, k))
            model = train_multitask(tasks, sub, run_cfg)
            acc = evaluate_acc(finetune_target(model, sub, run_cfg), sub)
            rows.append({"fraction": fraction, "method": method,
                         "seed_index": k, "acc": acc})
    out = cfg.output_dir / "label_sweep.csv"
    with open(out, "w") as f:
        f.write("fraction,method,seed,acc\n")
        for row in rows:
            f.write(f"{row['fraction']:.17g},{row['method']},"
                    f"{row['seed_index']},{row['acc']:.17g}\n")
    files.append(out)
    return {"rows": rows}


def run_replay(cfg: ExperimentConfig, files: list[Path]) -> dict:
    initial, sims, accs = load_replay_fixture(cfg.fixture)
    state = replay_selection(initial, sims, accs)
    out = cfg.output_dir / "trace.csv"
    write_trace_csv(out, state.trace)
    files.append(out)
    return {
        "final_pool": state.pool_a,
        "best_acc": state.best_acc,
        "trace": [
            {"iteration": r.iteration, "selected": r.selected_task,
             "acc": r.post_training_acc, "accepted": r.accepted,
             "similarities": r.similarities}
            for r in state.trace
        ],
    }


def run_experiment(config_path) -> dict:
    cfg = ExperimentConfig.from_file(config_path)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    timings = {}
    start = time.monotonic()
    try:
        if cfg.kind == "replay":
            metrics = run_replay(cfg, files)
        else:
            ds = _dataset_for(cfg)
            runner = {
                "baseline": run_baseline,
                "pairwise": run_pairwise,
                "mt_assl": run_mt_assl_experiment,
                "self_assl": run_self_assl,
                "label_sweep": run_label_sweep,
            }[cfg.kind]
            metrics = runner(cfg, ds, files)
    except Exception as exc:
        timings["total_seconds"] = time.monotonic() - start
        _write_manifest(cfg, {"error": f"{type(exc).__name__}: {exc}"},
                        files, timings, status="failed")
        raise
    timings["total_seconds"] = time.monotonic() - start
    return _write_manifest(cfg, metrics, files, timings)


# ---------------------------------------------------------------------------
# report / verify


def load_manifest(path) -> dict:
    with open(path) as f:
        return json.load(f)


def verify_manifest(path) -> list[str]:
    """Return a list of per-file problems; empty means everything checks out."""
    manifest = load_manifest(path)
    base = Path(path).parent
    problems = []
    for rel, expected in manifest.get("files", {}).items():
        target = base / rel
        if not target.exists():
            problems.append(f"{rel}: missing")
        elif _sha256_file(target) != expected:
            problems.append(f"{rel}: hash mismatch")
    return problems


def emit_report(manifest: dict) -> str:
    """Plain-text metric table; regeneration from a manifest is byte-stable."""
    lines = [f"aggssl run report (artifact {manifest['artifact_version']})",
             f"kind: {manifest['config']['kind']}",
             ""]
    metrics = manifest.get("metrics", {})

    def table(header: list[str], rows: list[list[str]]):
        widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
                  for i, h in enumerate(header)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines.append(fmt.format(*header))
        lines.append("  ".join("-" * w for w in widths))
        for r in rows:
            lines.append(fmt.format(*r))

    if "accuracy" in metrics:
        table(["task", "acc"],
              [[t, f"{a:.4f}"] for t, a in sorted(metrics["accuracy"].items())])
    if "pairs" in metrics:
        table(["a1", "a2", "similarity", "avg", "max", "int", "avg+/-", "max+/-"],
              [[p["a1"], p["a2"], f"{p['similarity']:.4f}",
                f"{p['avg_acc']:.4f}", f"{p['max_acc']:.4f}",
                f"{p['int_acc']:.4f}", f"{p['avg_delta']:+.4f}",
                f"{p['max_delta']:+.4f}"] for p in metrics["pairs"]])
    if "trace" in metrics:
        table(["iter", "selected", "acc", "accepted"],
              [[str(r["iteration"]), r["selected"], f"{r['acc']:.4f}",
                "yes" if r["accepted"] else "no"] for r in metrics["trace"]])
        lines.append("")
        lines.append(f"final pool: {' + '.join(metrics['final_pool'])}"
                     f"  best acc: {metrics['best_acc']:.4f}")
    if "per_seed" in metrics:
        table(["seed", "S(a=0)", "S(a=1)", "acc(a=0)", "acc(a=1)"],
              [[str(r["seed_index"]), f"{r['similarity_alpha0']:.4f}",
                f"{r['similarity_alpha1']:.4f}", f"{r['acc_alpha0']:.4f}",
                f"{r['acc_alpha1']:.4f}"] for r in metrics["per_seed"]])
    if "rows" in metrics:
        table(["fraction", "method", "seed", "acc"],
              [[f"{r['fraction']:g}", r["method"], str(r["seed_index"]),
                f"{r['acc']:.4f}"] for r in metrics["rows"]])

    lines.append("")
    lines.append("files:")
    for rel in sorted(manifest.get("files", {})):
        lines.append(f"  {rel}")
    return "\n".join(lines) + "\n"
