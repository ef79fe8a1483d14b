"""Linear centered kernel alignment between feature representations.

Analysis form works on plain numpy matrices; the loss form builds the same
quantity out of tape-recorded tensor ops so gradients reach the new
representation (and only it).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

MIN_PROBE_SIZE = 8
EPS_DEN = 1e-12


@dataclass
class FeatureMatrix:
    """n_samples x d_features activations tapped from one backbone layer."""

    values: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-d, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite entries in features '{self.source_tag}'")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def d_features(self) -> int:
        return self.values.shape[1]


@dataclass
class SimilarityMatrix:
    task_ids: list[str]
    values: np.ndarray = field(repr=False)

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("," + ",".join(self.task_ids) + "\n")
            for tid, row in zip(self.task_ids, self.values):
                f.write(tid + "," + ",".join(f"{v:.17g}" for v in row) + "\n")


def gram(x: FeatureMatrix | np.ndarray) -> np.ndarray:
    """Sample-space Gram matrix of pairwise feature dot products."""
    v = x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries")
    return v @ v.T


def center_gram(k: np.ndarray) -> np.ndarray:
    """Double centering H K H, H = I - 11^T/n: rows and columns sum to zero."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"centering needs a square matrix, got {k.shape}")
    row_means = k.mean(axis=1, keepdims=True)
    col_means = k.mean(axis=0, keepdims=True)
    return k - row_means - col_means + k.mean()


def _validate_pair(a: FeatureMatrix, b: FeatureMatrix):
    if a.n_samples != b.n_samples:
        raise ValueError(
            f"sample-count mismatch: '{a.source_tag}' has {a.n_samples}, "
            f"'{b.source_tag}' has {b.n_samples}"
        )
    if a.n_samples < MIN_PROBE_SIZE:
        raise ValueError(
            f"need at least {MIN_PROBE_SIZE} probe samples, got {a.n_samples}"
        )


def _centered_gram_norm(x: FeatureMatrix) -> tuple[np.ndarray, float]:
    kc = center_gram(gram(x))
    norm = np.sqrt(np.sum(kc * kc))
    if norm < EPS_DEN:
        raise ValueError(
            f"degenerate (constant) representation '{x.source_tag}': "
            "centered Gram has vanishing norm"
        )
    return kc, norm


def lcka(a: FeatureMatrix, b: FeatureMatrix) -> float:
    """Similarity in [0, 1]: normalized Frobenius alignment of centered Grams."""
    _validate_pair(a, b)
    kc, kn = _centered_gram_norm(a)
    lc, ln = _centered_gram_norm(b)
    s = float(np.sum(kc * lc) / (kn * ln))
    return min(max(s, 0.0), 1.0)


def lcka_feature_form(a: FeatureMatrix, b: FeatureMatrix) -> float:
    """Equivalent feature-space evaluation on column-centered matrices."""
    _validate_pair(a, b)
    ac = a.values - a.values.mean(axis=0, keepdims=True)
    bc = b.values - b.values.mean(axis=0, keepdims=True)
    num = np.sum((bc.T @ ac) ** 2)
    den_a = np.sqrt(np.sum((ac.T @ ac) ** 2))
    den_b = np.sqrt(np.sum((bc.T @ bc) ** 2))
    if den_a < EPS_DEN or den_b < EPS_DEN:
        tag = a.source_tag if den_a < EPS_DEN else b.source_tag
        raise ValueError(f"degenerate (constant) representation '{tag}'")
    s = float(num / (den_a * den_b))
    return min(max(s, 0.0), 1.0)


def _center_gram_t(k: Tensor) -> Tensor:
    n = k.values.shape[0]
    row = T.tmean(k, axis=1, keepdims=True)
    col = T.tmean(k, axis=0, keepdims=True)
    grand = T.tmean(k)
    return k - row - col + grand


def lcka_loss(new_features: Tensor, ref_features: FeatureMatrix) -> Tensor:
    """Negative differentiable LCKA against a frozen reference.

    Gradient flows only into ``new_features``; the reference enters as a
    constant. A collapsed minibatch contributes zero loss instead of
    aborting the run.
    """
    n = new_features.values.shape[0]
    if n != ref_features.n_samples:
        raise ValueError(
            f"batch size {n} != reference sample count {ref_features.n_samples}"
        )
    if n < MIN_PROBE_SIZE:
        raise ValueError(f"need at least {MIN_PROBE_SIZE} samples, got {n}")

    lc = center_gram(gram(ref_features))
    ln = np.sqrt(np.sum(lc * lc))
    if ln < EPS_DEN:
        raise ValueError(
            f"degenerate reference representation '{ref_features.source_tag}'"
        )

    kc = _center_gram_t(T.matmul(new_features, T.transpose(new_features)))
    kn_sq = float(np.sum(kc.values * kc.values))
    if kn_sq < EPS_DEN * EPS_DEN:
        log.warning("collapsed minibatch in complement loss; contributing 0")
        return T.tsum(new_features * Tensor(np.zeros_like(new_features.values)))

    num = T.tsum(kc * Tensor(lc))
    den = T.sqrt(T.tsum(T.square(kc))) * Tensor(ln)
    return -(num / den)


def similarity_matrix(reps: list[FeatureMatrix]) -> SimilarityMatrix:
    if len(reps) < 2:
        raise ValueError("need at least two representations")
    n = len(reps)
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            s = lcka(reps[i], reps[j])
            values[i, j] = values[j, i] = s
    return SimilarityMatrix([r.source_tag for r in reps], values)


# ---------------------------------------------------------------------------
# feature-dump file: "n d source_tag" header, then n rows of d values


def save_features(path, fm: FeatureMatrix):
    with open(path, "w") as f:
        f.write(f"{fm.n_samples} {fm.d_features} {fm.source_tag}\n")
        for row in fm.values:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_features(path) -> FeatureMatrix:
    with open(path) as f:
        header = f.readline().split(maxsplit=2)
        n, d = int(header[0]), int(header[1])
        tag = header[2].strip() if len(header) > 2 else ""
        values = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if values.shape != (n, d):
        raise ValueError(f"feature dump shape {values.shape} != header ({n}, {d})")
    return FeatureMatrix(values, source_tag=tag)
