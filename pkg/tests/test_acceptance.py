"""Acceptance gate: the headline behavioral claims, each with its stated
tolerance. Every test prints a PASS/FAIL line with the measured quantity so
a failed run documents how far off it landed.
"""

import time
from pathlib import Path

import numpy as np
import pytest

import aggssl
from aggssl import cka
from aggssl.aggregator import load_replay_fixture, replay_selection, run_mt_assl
from aggssl.cka import FeatureMatrix, center_gram, gram, lcka, lcka_feature_form, lcka_loss
from aggssl.data import generate_dataset, ntxent_loss, standard_task_pool
from aggssl.harness import run_experiment
from aggssl.nn import parameter_hash
from aggssl.tensor import Tensor, backward, mse_loss, softmax_cross_entropy
from aggssl.trainer import (
    TrainerConfig,
    derive_seed,
    evaluate_acc,
    extract_features,
    finetune_target,
    pretrain_proxy,
    train_multitask,
    train_self_aggregative,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

# frozen by an independent direct-formula script before the implementation
ORACLE_X = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=np.float64)
ORACLE_Y = np.array([[2, 1], [0, 3], [1, 1], [-1, 0]], dtype=np.float64)
ORACLE_VALUE = 0.6629719900251196

# regimes for the two training-based claims (selected by scan; the numeric
# thresholds themselves are fixed by the acceptance criteria)
MTASSL_SPLITS = {"pretrain": 3200, "train": 96, "test": 320, "probe": 256}
MTASSL_SEEDS = 5
MTASSL_MIN_GAIN = 0.02  # Int ACC over max single ACC, mean over seeds

SELFASSL_SPLITS = {"pretrain": 1280, "train": 96, "test": 320, "probe": 128}
SELFASSL_SEEDS = 5
SELFASSL_EPOCHS = dict(epochs_proxy=10, epochs_selfagg=10, epochs_finetune=20)
SELFASSL_ALPHA = 1.0
SELFASSL_MIN_SIM_DROP = 0.05
SELFASSL_MAX_ACC_DROP = 0.005  # 0.5 accuracy points


def report(name: str, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


class TestCriterion1ReplayStl10:
    def test_published_trace_exact(self):
        start = time.monotonic()
        initial, sims, accs = load_replay_fixture(FIXTURES / "replay_stl10.csv")
        state = replay_selection(initial, sims, accs)
        elapsed = time.monotonic() - start
        selected = [r.selected_task for r in state.trace]
        accepted = [r.accepted for r in state.trace]
        ok = (
            selected == ["SimCLR", "2D Rot", "SRC", "Inpaint"]
            and accepted == [True, True, True, False]
            and state.pool_a == ["SimCLR", "2D Rot", "SRC"]
            and state.best_acc == 79.43
            and elapsed < 1.0
        )
        report("replay STL10", ok,
               f"pool={state.pool_a} best={state.best_acc} ({elapsed:.3f}s)")


class TestCriterion2ReplayBrain:
    def test_published_trace_exact(self):
        start = time.monotonic()
        initial, sims, accs = load_replay_fixture(FIXTURES / "replay_brain.csv")
        state = replay_selection(initial, sims, accs)
        elapsed = time.monotonic() - start
        selected = [r.selected_task for r in state.trace]
        accepted = [r.accepted for r in state.trace]
        ok = (
            selected == ["SC-ASSL", "Cube", "3D Rot"]
            and accepted == [True, True, False]
            and state.pool_a == ["SC-ASSL", "Cube"]
            and state.best_acc == 90.20
            and elapsed < 1.0
        )
        report("replay brain", ok,
               f"pool={state.pool_a} best={state.best_acc} ({elapsed:.3f}s)")


class TestCriterion3LckaInvariants:
    def test_two_hundred_randomized_instances(self):
        start = time.monotonic()
        rng = np.random.default_rng(42)
        worst = {"excursion": 0.0, "symmetry": 0.0, "self": 0.0,
                 "orthogonal": 0.0, "scaling": 0.0, "shift": 0.0}
        for _ in range(200):
            n = int(rng.integers(8, 65))
            da = int(rng.integers(1, 33))
            db = int(rng.integers(1, 33))
            a = FeatureMatrix(rng.standard_normal((n, da)), "a")
            b = FeatureMatrix(rng.standard_normal((n, db)), "b")

            # pre-clamp value straight from the centered-Gram formula
            kc, lc = center_gram(gram(a)), center_gram(gram(b))
            raw = np.sum(kc * lc) / np.sqrt(np.sum(kc * kc) * np.sum(lc * lc))
            worst["excursion"] = max(worst["excursion"],
                                     max(0.0 - raw, raw - 1.0, 0.0))
            s = lcka(a, b)
            assert 0.0 <= s <= 1.0
            worst["symmetry"] = max(worst["symmetry"], abs(s - lcka(b, a)))
            worst["self"] = max(worst["self"], abs(lcka(a, a) - 1.0))

            q, _ = np.linalg.qr(rng.standard_normal((da, da)))
            rotated = FeatureMatrix(a.values @ q, "aQ")
            worst["orthogonal"] = max(worst["orthogonal"],
                                      abs(lcka(a, rotated) - 1.0))
            scaled = FeatureMatrix(a.values * 3.7, "a-scaled")
            worst["scaling"] = max(worst["scaling"], abs(lcka(scaled, b) - s))
            shifted = FeatureMatrix(a.values + rng.standard_normal(da), "a-shift")
            worst["shift"] = max(worst["shift"], abs(lcka(shifted, b) - s))
        elapsed = time.monotonic() - start
        ok = (worst["excursion"] < 1e-9 and worst["symmetry"] < 1e-12
              and worst["self"] < 1e-10 and worst["orthogonal"] < 1e-8
              and worst["scaling"] < 1e-10 and worst["shift"] < 1e-10
              and elapsed < 10.0)
        report("LCKA invariants", ok,
               " ".join(f"{k}={v:.2e}" for k, v in worst.items())
               + f" ({elapsed:.1f}s)")


class TestCriterion4DualForm:
    def test_gram_vs_feature_form(self):
        start = time.monotonic()
        rng = np.random.default_rng(43)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(8, 65))
            a = FeatureMatrix(rng.standard_normal((n, int(rng.integers(1, 33)))), "a")
            b = FeatureMatrix(rng.standard_normal((n, int(rng.integers(1, 33)))), "b")
            worst = max(worst, abs(lcka(a, b) - lcka_feature_form(a, b)))
        elapsed = time.monotonic() - start
        ok = worst < 1e-8 and elapsed < 5.0
        report("dual-form equivalence", ok, f"max|Δ|={worst:.2e} ({elapsed:.1f}s)")

    def test_one_sided_vs_double_centering(self):
        start = time.monotonic()
        rng = np.random.default_rng(44)
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(3, 20))
            k = rng.standard_normal((n, n))
            k = k + k.T
            l = rng.standard_normal((n, n))
            l = l + l.T
            double = np.sum(center_gram(k) * center_gram(l))
            single = np.sum(center_gram(k) * l)
            worst = max(worst, abs(double - single) / max(1.0, abs(double)))
        elapsed = time.monotonic() - start
        ok = worst < 1e-10 and elapsed < 5.0
        report("one-sided centering", ok, f"max relΔ={worst:.2e} ({elapsed:.1f}s)")


def _finite_diff(f, x0, h=1e-5):
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy(); xp.flat[i] += h
        xm = x0.copy(); xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel_err(analytic, fd):
    return np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-8)


class TestCriterion5Gradients:
    def test_all_losses_match_finite_differences(self):
        start = time.monotonic()
        worst = {"softmax_ce": 0.0, "mse": 0.0, "ntxent": 0.0, "lcka_loss": 0.0}
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)

            logits0 = rng.standard_normal((6, 4))
            labels = rng.integers(0, 4, size=6)
            t = Tensor(logits0.copy(), requires_grad=True)
            backward(softmax_cross_entropy(t, labels))
            fd = _finite_diff(
                lambda v: softmax_cross_entropy(Tensor(v), labels).item(), logits0)
            worst["softmax_ce"] = max(worst["softmax_ce"], _rel_err(t.grad, fd))

            pred0 = rng.standard_normal((5, 3))
            target = rng.standard_normal((5, 3))
            t = Tensor(pred0.copy(), requires_grad=True)
            backward(mse_loss(t, Tensor(target)))
            fd = _finite_diff(
                lambda v: mse_loss(Tensor(v), Tensor(target)).item(), pred0)
            worst["mse"] = max(worst["mse"], _rel_err(t.grad, fd))

            feats0 = rng.standard_normal((6, 4))
            pairing = np.array([1, 0, 3, 2, 5, 4])
            t = Tensor(feats0.copy(), requires_grad=True)
            backward(ntxent_loss(t, pairing))
            fd = _finite_diff(
                lambda v: ntxent_loss(Tensor(v), pairing).item(), feats0)
            worst["ntxent"] = max(worst["ntxent"], _rel_err(t.grad, fd))

            new0 = rng.standard_normal((10, 4))
            ref = FeatureMatrix(rng.standard_normal((10, 3)), "ref")
            t = Tensor(new0.copy(), requires_grad=True)
            backward(lcka_loss(t, ref))
            fd = _finite_diff(
                lambda v: lcka_loss(Tensor(v, requires_grad=True), ref).item(), new0)
            worst["lcka_loss"] = max(worst["lcka_loss"], _rel_err(t.grad, fd))
        elapsed = time.monotonic() - start
        ok = max(worst.values()) < 1e-4 and elapsed < 30.0
        report("gradient correctness", ok,
               " ".join(f"{k}={v:.2e}" for k, v in worst.items())
               + f" ({elapsed:.1f}s)")


class TestCriterion6FixedOracle:
    def test_fixed_pair(self, monkeypatch):
        # the frozen oracle predates min_probe_size; bypass only the floor
        monkeypatch.setattr(cka, "MIN_PROBE_SIZE", 2)
        got = lcka(FeatureMatrix(ORACLE_X, "x"), FeatureMatrix(ORACLE_Y, "y"))
        ok = abs(got - ORACLE_VALUE) < 1e-10
        report("fixed LCKA oracle", ok, f"got={got!r} want={ORACLE_VALUE!r}")


class TestCriterion7MtAsslDirectional:
    def test_pair_beats_best_single_by_two_points(self):
        start = time.monotonic()
        pool = standard_task_pool()
        gains, rows = [], []
        for seed in range(MTASSL_SEEDS):
            ds = generate_dataset(sum(MTASSL_SPLITS.values()), seed, MTASSL_SPLITS)
            cfg = TrainerConfig(seed=seed)
            rot = evaluate_acc(finetune_target(
                pretrain_proxy(pool["rotation"], ds, cfg), ds, cfg), ds)
            col = evaluate_acc(finetune_target(
                pretrain_proxy(pool["color"], ds, cfg), ds, cfg), ds)
            pair = evaluate_acc(finetune_target(
                train_multitask([pool["rotation"], pool["color"]], ds, cfg),
                ds, cfg), ds)
            gains.append(pair - max(rot, col))
            rows.append(f"seed{seed}: rot={rot:.3f} col={col:.3f} "
                        f"pair={pair:.3f} gain={gains[-1]:+.3f}")
        elapsed = time.monotonic() - start
        mean_gain = float(np.mean(gains))
        ok = mean_gain >= MTASSL_MIN_GAIN and elapsed < 600.0
        report("MT-ASSL directional", ok,
               f"mean gain={mean_gain:+.3f} (need >= +{MTASSL_MIN_GAIN}) "
               f"over {MTASSL_SEEDS} seeds in {elapsed:.0f}s; "
               + "; ".join(rows))


class TestCriterion8SelfAssl:
    def test_similarity_drops_without_accuracy_loss(self):
        start = time.monotonic()
        pool = standard_task_pool()
        task = pool["rotation"]
        rows = []
        for seed in range(SELFASSL_SEEDS):
            ds = generate_dataset(sum(SELFASSL_SPLITS.values()), seed,
                                  SELFASSL_SPLITS)
            probe = ds.split_images("probe")
            ref_cfg = TrainerConfig(seed=derive_seed(seed, "ref"),
                                    **SELFASSL_EPOCHS)
            ref = pretrain_proxy(task, ds, ref_cfg).freeze()
            ref_features = extract_features(ref, probe, tag="reference")

            run_cfg = TrainerConfig(seed=derive_seed(seed, "run"),
                                    complement_weight=SELFASSL_ALPHA,
                                    **SELFASSL_EPOCHS)
            base_cfg = TrainerConfig(seed=derive_seed(seed, "run"),
                                     complement_weight=0.0, **SELFASSL_EPOCHS)
            baseline = train_self_aggregative(task, ref, ds, base_cfg)
            selfagg = train_self_aggregative(task, ref, ds, run_cfg)
            s0 = lcka(extract_features(baseline, probe, tag="base"), ref_features)
            s1 = lcka(extract_features(selfagg, probe, tag="self"), ref_features)
            a0 = evaluate_acc(finetune_target(baseline, ds, base_cfg), ds)
            a1 = evaluate_acc(finetune_target(selfagg, ds, run_cfg), ds)
            rows.append((s0, s1, a0, a1))
        elapsed = time.monotonic() - start
        r = np.array(rows)
        sim_drop = float(r[:, 0].mean() - r[:, 1].mean())
        acc_diff = float(r[:, 3].mean() - r[:, 2].mean())
        ok = (sim_drop >= SELFASSL_MIN_SIM_DROP
              and acc_diff >= -SELFASSL_MAX_ACC_DROP
              and r[:, 1].mean() < r[:, 0].mean()
              and elapsed < 600.0)
        report("self-ASSL complementarity", ok,
               f"S(a=0)={r[:, 0].mean():.3f} S(a=1)={r[:, 1].mean():.3f} "
               f"drop={sim_drop:+.3f} (need >= {SELFASSL_MIN_SIM_DROP}); "
               f"acc(a=0)={r[:, 2].mean():.3f} acc(a=1)={r[:, 3].mean():.3f} "
               f"diff={acc_diff:+.3f} (need >= -{SELFASSL_MAX_ACC_DROP}) "
               f"over {SELFASSL_SEEDS} seeds in {elapsed:.0f}s")


class TestCriterion9FrozenReference:
    def test_reference_untouched_and_gradient_free(self):
        pool = standard_task_pool()
        ds = generate_dataset(
            192, seed=7,
            split_sizes={"pretrain": 96, "train": 32, "test": 32, "probe": 32})
        small = dict(epochs_proxy=2, epochs_selfagg=2, epochs_finetune=1,
                     batch_size=16, layer_widths=[768, 32, 16])
        ref = pretrain_proxy(pool["rotation"], ds,
                             TrainerConfig(seed=1, **small)).freeze()
        before = ref.frozen_hash
        train_self_aggregative(pool["color"], ref, ds,
                               TrainerConfig(seed=2, **small))
        after = parameter_hash(ref.named_parameters())
        grads_clean = all(p.grad is None or not np.any(p.grad)
                          for p in ref.backbone.parameters())
        ok = before == after and grads_clean
        report("frozen reference", ok,
               f"hash unchanged={before == after} no gradient={grads_clean}")


class TestCriterion10Determinism:
    def test_config_run_twice_is_hash_identical(self, tmp_path):
        body = """
[experiment]
kind = baseline
output_dir = {out}
[dataset]
seed = 0
pretrain = 64
train = 32
test = 32
probe = 32
[tasks]
tasks = rotation
[trainer]
epochs_proxy = 2
epochs_finetune = 2
batch_size = 16
layer_widths = 768,32,16
"""
        manifests = []
        for run in ("one", "two"):
            path = tmp_path / f"{run}.ini"
            path.write_text(body.format(out=tmp_path / run))
            manifests.append(run_experiment(path))
        ok = (manifests[0]["files"] == manifests[1]["files"]
              and manifests[0]["metrics"] == manifests[1]["metrics"])
        report("determinism", ok,
               f"file hashes equal={manifests[0]['files'] == manifests[1]['files']}")


class TestCriterion11AlgorithmStructure:
    def test_structure_invariants_and_degenerate_case(self):
        pool = standard_task_pool()
        ds = generate_dataset(
            192, seed=8,
            split_sizes={"pretrain": 96, "train": 32, "test": 32, "probe": 32})
        cfg = TrainerConfig(seed=0, epochs_proxy=1, epochs_finetune=1,
                            batch_size=16, layer_widths=[768, 32, 16])
        tasks = [pool["rotation"], pool["color"], pool["jigsaw"]]
        state, _ = run_mt_assl(tasks, ds, cfg)
        ids = {t.task_id for t in tasks}
        terminates = len(state.trace) <= len(tasks)
        partition = (not set(state.pool_a) & set(state.pool_p)
                     and set(state.pool_a) | set(state.pool_p) <= ids)
        # every accepted prefix of the trace is a valid A-pool history
        pool_a = []
        history_ok = True
        for rec in state.trace:
            if rec.accepted:
                pool_a.append(rec.selected_task)
            history_ok &= len(set(pool_a)) == len(pool_a)
        history_ok &= pool_a == state.pool_a

        # |tasks| = 1: plain fine-tuned single-proxy baseline
        single_state, single_model = run_mt_assl([pool["rotation"]], ds, cfg)
        baseline = finetune_target(
            pretrain_proxy(pool["rotation"], ds, cfg), ds, cfg)
        degenerate = (
            single_state.pool_a == ["rotation"]
            and len(single_state.trace) == 1
            and parameter_hash(single_model.named_parameters())
            == parameter_hash(baseline.named_parameters())
            and single_state.best_acc == evaluate_acc(baseline, ds)
        )
        ok = terminates and partition and history_ok and degenerate
        report("algorithm structure", ok,
               f"terminates={terminates} partition={partition} "
               f"history={history_ok} degenerate={degenerate}")
