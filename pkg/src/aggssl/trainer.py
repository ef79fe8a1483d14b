"""Training regimes: single-proxy pretraining, target fine-tuning with
accuracy evaluation, round-robin multi-task training over a task pool, and
self-aggregative training against a frozen reference representation.

Every regime is a pure function of (config, dataset): repeated runs are
bit-identical. Seeds for initialization and batch draws are derived by
hashing (config seed, purpose, task, epoch, step), so a one-task
multi-task run takes exactly the same random path as plain pretraining.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cka import FeatureMatrix, lcka_loss
from .data import (
    Batch,
    ProxyTaskSpec,
    SyntheticDataset,
    make_proxy_batch,
    ntxent_loss,
    target_batch,
)
from .nn import Head, MlpBackbone, parameter_hash
from .tensor import Adam, Tensor, backward

TARGET_CLASSES = 16


def derive_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class TrainerConfig:
    epochs_proxy: int = 25
    epochs_finetune: int = 20
    epochs_selfagg: int = 10
    batch_size: int = 16
    lr_proxy: float = 1e-3
    lr_finetune: float = 1e-3
    complement_weight: float = 1.0
    feature_tap: int | None = None  # None = final backbone layer
    layer_widths: list[int] = field(default_factory=lambda: [768, 256, 128, 64])
    ntxent_temperature: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs_proxy, self.epochs_finetune, self.epochs_selfagg) < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.lr_proxy <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        if self.complement_weight < 0:
            raise ValueError("complement weight must be nonnegative")


@dataclass
class TrainedModel:
    backbone: MlpBackbone
    heads: dict[str, Head]
    provenance: list[dict] = field(default_factory=list)
    frozen: bool = False
    frozen_hash: str | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        named = dict(self.backbone.named_parameters())
        for task_id, head in self.heads.items():
            named[f"head.{task_id}.w"] = head.weight
            named[f"head.{task_id}.b"] = head.bias
        return named

    def freeze(self) -> "TrainedModel":
        self.frozen = True
        for p in self.named_parameters().values():
            p.grad = None  # any gradient appearing later is a contract breach
        self.frozen_hash = parameter_hash(self.named_parameters())
        return self

    def verify_frozen(self):
        if not self.frozen:
            raise ValueError("model is not frozen")
        current = parameter_hash(self.named_parameters())
        if current != self.frozen_hash:
            raise RuntimeError("frozen model was mutated: parameter hash changed")

    def clone_unfrozen(self) -> "TrainedModel":
        clone = copy.deepcopy(self)
        clone.frozen = False
        clone.frozen_hash = None
        return clone


# ---------------------------------------------------------------------------
# loss evaluation


def task_loss(backbone: MlpBackbone, head: Head, batch: Batch,
              cfg: TrainerConfig) -> Tensor:
    out = head.forward(backbone.forward(batch.inputs))
    if batch.loss_kind == "classification":
        return T.softmax_cross_entropy(out, batch.labels)
    if batch.loss_kind == "reconstruction":
        return T.mse_loss(out, batch.recon_target)
    if batch.loss_kind == "contrastive":
        return ntxent_loss(out, batch.pairing, cfg.ntxent_temperature)
    raise ValueError(f"unknown loss kind '{batch.loss_kind}'")


def multitask_loss(model: TrainedModel, tasks: list[ProxyTaskSpec],
                   batches: dict[str, Batch], cfg: TrainerConfig) -> float:
    """Joint objective at fixed parameters: the sum of per-task losses."""
    total = 0.0
    for task in tasks:
        total += task_loss(model.backbone, model.heads[task.task_id],
                           batches[task.task_id], cfg).item()
    return total


# ---------------------------------------------------------------------------
# shared training loop


def _epoch_order(ds: SyntheticDataset, cfg: TrainerConfig, task_id: str,
                 epoch: int) -> np.ndarray:
    n = len(ds.splits["pretrain"])
    rng = np.random.default_rng(derive_seed(cfg.seed, "order", task_id, epoch))
    return rng.permutation(n)


def _train_tasks(
    tasks: list[ProxyTaskSpec],
    ds: SyntheticDataset,
    cfg: TrainerConfig,
    epochs: int,
    complement_ref: TrainedModel | None = None,
) -> TrainedModel:
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids: {ids}")
    if len(ds.splits["pretrain"]) == 0:
        raise ValueError("unlabeled pretrain split is empty")

    alpha = cfg.complement_weight if complement_ref is not None else 0.0
    if complement_ref is not None:
        complement_ref.verify_frozen()
        if complement_ref.backbone.layer_widths != cfg.layer_widths:
            raise ValueError(
                f"reference widths {complement_ref.backbone.layer_widths} "
                f"!= configured widths {cfg.layer_widths}"
            )

    backbone = MlpBackbone(cfg.layer_widths, seed=derive_seed(cfg.seed, "backbone"))
    heads = {
        t.task_id: Head(backbone.feature_width, t.head_output_width,
                        seed=derive_seed(cfg.seed, "head", t.task_id))
        for t in tasks
    }
    params = backbone.parameters()
    for t in tasks:
        params.extend(heads[t.task_id].parameters())
    opt = Adam(params, lr=cfg.lr_proxy)

    steps = len(ds.splits["pretrain"]) // cfg.batch_size
    if steps == 0:
        raise ValueError("pretrain split smaller than one batch")
    history: list[dict] = []
    for epoch in range(epochs):
        orders = {t.task_id: _epoch_order(ds, cfg, t.task_id, epoch) for t in tasks}
        sums = {t.task_id: 0.0 for t in tasks}
        com_sum = 0.0
        for step in range(steps):
            for task in tasks:
                idx = orders[task.task_id][step * cfg.batch_size:(step + 1) * cfg.batch_size]
                batch = make_proxy_batch(
                    task, ds, idx,
                    derive_seed(cfg.seed, "batch", task.task_id, epoch, step),
                )
                loss = task_loss(backbone, heads[task.task_id], batch, cfg)
                sums[task.task_id] += loss.item()
                if alpha > 0.0:
                    ref_values = complement_ref.backbone.forward(
                        Tensor(batch.inputs.values)).values
                    com = lcka_loss(
                        backbone.forward(batch.inputs),
                        FeatureMatrix(ref_values, source_tag="reference"),
                    )
                    com_sum += com.item()
                    # com equals -S[new, ref]; subtracting it penalizes
                    # similarity, steering the new features away from the
                    # reference subspace (the stated goal of the complement
                    # term -- adding it verbatim would maximize similarity).
                    # Normalized per sample so its pressure matches the
                    # per-sample task loss: unnormalized, one S term per
                    # batch overwhelms the task objective and collapses
                    # the representation.
                    n_rows = batch.inputs.values.shape[0]
                    loss = loss - Tensor(alpha / n_rows) * com
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(
                        f"non-finite loss for task '{task.task_id}' "
                        f"at epoch {epoch}, step {step}"
                    )
                opt.zero_grad()
                backward(loss)
                opt.step()
        for task in tasks:
            history.append({"epoch": epoch, "task_id": task.task_id,
                            "loss_component": "task", "value": sums[task.task_id] / steps})
        if alpha > 0.0:
            history.append({"epoch": epoch, "task_id": "+".join(ids),
                            "loss_component": "complement",
                            "value": com_sum / (steps * len(tasks))})

    if complement_ref is not None:
        complement_ref.verify_frozen()

    record = {
        "regime": "self_aggregative" if complement_ref is not None else
                  ("multitask" if len(tasks) > 1 else "pretrain_proxy"),
        "tasks": ids,
        "epochs": epochs,
        "seed": cfg.seed,
        "complement_weight": alpha,
        "loss_history": history,
    }
    return TrainedModel(backbone, heads, provenance=[record])


# ---------------------------------------------------------------------------
# public regimes


def pretrain_proxy(task: ProxyTaskSpec, ds: SyntheticDataset,
                   cfg: TrainerConfig) -> TrainedModel:
    return _train_tasks([task], ds, cfg, cfg.epochs_proxy)


def train_multitask(tasks: list[ProxyTaskSpec], ds: SyntheticDataset,
                    cfg: TrainerConfig) -> TrainedModel:
    if len(tasks) < 1:
        raise ValueError("need at least one task")
    return _train_tasks(tasks, ds, cfg, cfg.epochs_proxy)


def train_self_aggregative(task: ProxyTaskSpec, ref: TrainedModel,
                           ds: SyntheticDataset, cfg: TrainerConfig) -> TrainedModel:
    if not ref.frozen:
        raise ValueError("reference model must be frozen")
    return _train_tasks([task], ds, cfg, cfg.epochs_selfagg, complement_ref=ref)


def finetune_target(model: TrainedModel, ds: SyntheticDataset,
                    cfg: TrainerConfig) -> TrainedModel:
    """Fine-tune a copy of the backbone plus a fresh target head."""
    if model.frozen:
        raise ValueError("cannot fine-tune a frozen model")
    if len(ds.splits["train"]) == 0:
        raise ValueError("labeled train split is empty")

    tuned = model.clone_unfrozen()
    head = Head(tuned.backbone.feature_width, TARGET_CLASSES,
                seed=derive_seed(cfg.seed, "head", "target"))
    tuned.heads["target"] = head
    params = tuned.backbone.parameters() + head.parameters()
    opt = Adam(params, lr=cfg.lr_finetune)

    n = len(ds.splits["train"])
    steps = max(n // cfg.batch_size, 1)
    history = []
    for epoch in range(cfg.epochs_finetune):
        rng = np.random.default_rng(derive_seed(cfg.seed, "order", "target", epoch))
        order = rng.permutation(n)
        total = 0.0
        for step in range(steps):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch = target_batch(ds, "train", idx)
            loss = task_loss(tuned.backbone, head, batch, cfg)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(
                    f"non-finite target loss at epoch {epoch}, step {step}"
                )
            total += loss.item()
            opt.zero_grad()
            backward(loss)
            opt.step()
        history.append({"epoch": epoch, "task_id": "target",
                        "loss_component": "task", "value": total / steps})
    tuned.provenance.append({
        "regime": "finetune_target", "epochs": cfg.epochs_finetune,
        "seed": cfg.seed, "loss_history": history,
    })
    return tuned


def evaluate_acc(model: TrainedModel, ds: SyntheticDataset,
                 split: str = "test") -> float:
    if "target" not in model.heads:
        raise ValueError("model has no target head")
    idx = ds.splits[split]
    if len(idx) == 0:
        raise ValueError(f"split '{split}' is empty")
    batch = target_batch(ds, split, np.arange(len(idx)))
    logits = model.heads["target"].forward(
        model.backbone.forward(batch.inputs)).values
    pred = np.argmax(logits, axis=1)  # ties resolve to the lowest index
    return float(np.mean(pred == batch.labels))


def extract_features(model: TrainedModel, probe_images: np.ndarray,
                     tap: int | None = None, tag: str = "") -> FeatureMatrix:
    """Probe-set activations at the tapped layer; nothing lands on the tape."""
    flat = probe_images.reshape(probe_images.shape[0], -1)
    values = model.backbone.forward(Tensor(flat), tap=tap).values
    layer = tap if tap is not None else model.backbone.n_layers
    return FeatureMatrix(values, source_tag=f"{tag}@layer{layer}")


def write_metrics_csv(path, model: TrainedModel):
    with open(path, "w") as f:
        f.write("epoch,task_id,loss_component,value\n")
        for record in model.provenance:
            for row in record.get("loss_history", []):
                f.write(f"{row['epoch']},{row['task_id']},"
                        f"{row['loss_component']},{row['value']:.17g}\n")
