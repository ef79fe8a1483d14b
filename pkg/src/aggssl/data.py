"""Procedural 16x16 image dataset with factorized shape x color classes,
plus the proxy-task batch generators (rotation, jigsaw, inpainting,
contrastive, color prediction) and the labeled target task.

Everything is a pure function of (seed, indices): batches regenerate
bit-identically, which the trainers rely on for determinism.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

H = W = 16
C = 3
INPUT_DIM = H * W * C

N_SHAPES = 4
N_COLORS = 4
N_CLASSES = N_SHAPES * N_COLORS

SHAPE_NAMES = ["bar", "cross", "disc", "frame"]
COLORS = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.90, 0.15],
        [0.20, 0.30, 0.95],
        [0.90, 0.85, 0.10],
    ]
)

JIGSAW_PERMS = list(itertools.permutations(range(4)))  # lexicographic, identity first

INPAINT_LO, INPAINT_HI = 4, 12  # central 8x8 block

SPLIT_NAMES = ["pretrain", "train", "test", "probe"]


@dataclass
class ProxyTaskSpec:
    task_id: str
    loss_kind: str  # classification | reconstruction | contrastive
    head_output_width: int
    pseudo_label_space: str
    rng_stream_id: int


def standard_task_pool() -> dict[str, ProxyTaskSpec]:
    """The five desk-scale proxy tasks. Color prediction is an artifact
    extension: it is shape-blind by construction, guaranteeing one provably
    complementary partner for the rotation task."""
    return {
        "rotation": ProxyTaskSpec("rotation", "classification", 4,
                                  "rotation index in {0,90,180,270}", 1),
        "jigsaw": ProxyTaskSpec("jigsaw", "classification", 24,
                                "2x2 tile permutation index", 2),
        "inpaint": ProxyTaskSpec("inpaint", "reconstruction",
                                 (INPAINT_HI - INPAINT_LO) ** 2 * C,
                                 "masked central 8x8 pixels", 3),
        "contrastive": ProxyTaskSpec("contrastive", "contrastive", 16,
                                     "positive-pair matching over 2b views", 4),
        "color": ProxyTaskSpec("color", "classification", 4,
                               "dominant hue bin (artifact extension)", 5),
    }


@dataclass
class Batch:
    inputs: Tensor  # b x INPUT_DIM
    task_id: str
    loss_kind: str
    labels: np.ndarray | None = None  # class indices
    recon_target: Tensor | None = None
    pairing: np.ndarray | None = None  # pairing[i] = index of i's positive view


@dataclass
class SyntheticDataset:
    images: np.ndarray  # N x H x W x C in [0,1]
    shape_id: np.ndarray
    color_id: np.ndarray
    splits: dict[str, np.ndarray] = field(repr=False)
    seed: int = 0

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    @property
    def target_label(self) -> np.ndarray:
        return self.shape_id * N_COLORS + self.color_id

    def split_images(self, split: str) -> np.ndarray:
        return self.images[self.splits[split]]


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape_id: int) -> np.ndarray:
    # all four templates cover 48-49 cells so that total color mass carries
    # no shape information, and none is invariant under 90-degree rotation
    m = np.zeros((H, W), dtype=bool)
    if shape_id == 0:  # off-center vertical bar
        m[2:14, 3:7] = True
    elif shape_id == 1:  # cross, vertical arm off-center and longer above
        m[7:10, 2:14] = True
        m[3:7, 4:6] = True
        m[10:12, 4:6] = True
    elif shape_id == 2:  # off-center disc
        yy, xx = np.mgrid[0:H, 0:W]
        m = (yy - 5.0) ** 2 + (xx - 10.0) ** 2 <= 16.0
    elif shape_id == 3:  # frame with a marked top edge
        m[2:14, 2:14] = True
        m[3:13, 3:13] = False
        m[3, 5:9] = True
    else:
        raise ValueError(f"unknown shape id {shape_id}")
    return m


_SHAPE_MASKS = None


def _masks() -> list[np.ndarray]:
    global _SHAPE_MASKS
    if _SHAPE_MASKS is None:
        _SHAPE_MASKS = [_shape_mask(s) for s in range(N_SHAPES)]
    return _SHAPE_MASKS


# rendering hardness: clutter plus random shape placement keep the 16-class
# target task from saturating under a handful of labels, so the quality of
# the pretrained representation shows up in the fine-tuned accuracy
BACKGROUND_HI = 0.5
SHAPE_JITTER = (0.70, 1.00)
NOISE_BLEND = 0.15
MAX_SHIFT = 2  # toroidal shape translation in pixels, each axis


def _render(rng: np.random.Generator, shape_id: int, color_id: int) -> np.ndarray:
    img = rng.uniform(0.0, BACKGROUND_HI, size=(H, W, C))
    dy, dx = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
    mask = np.roll(_masks()[shape_id], (dy, dx), axis=(0, 1))
    jitter = rng.uniform(SHAPE_JITTER[0], SHAPE_JITTER[1], size=(H, W, 1))
    colored = COLORS[color_id][None, None, :] * jitter
    img = np.where(mask[:, :, None], colored, img)
    img = (1.0 - NOISE_BLEND) * img + NOISE_BLEND * rng.uniform(0.0, 1.0, size=(H, W, C))
    return np.clip(img, 0.0, 1.0)


def generate_dataset(
    n_images: int,
    seed: int,
    split_sizes: dict[str, int] | None = None,
) -> SyntheticDataset:
    """Deterministic dataset; classes balanced within +-1 inside every split."""
    if n_images < 64:
        raise ValueError(f"need at least 64 images, got {n_images}")
    if split_sizes is None:
        n_probe = max(n_images // 8, 32)
        n_eval = max(n_images // 8, 32)
        split_sizes = {
            "pretrain": n_images - 2 * n_eval - n_probe,
            "train": n_eval,
            "test": n_eval,
            "probe": n_probe,
        }
    total = sum(split_sizes.values())
    if total != n_images:
        raise ValueError(f"split sizes sum to {total}, expected {n_images}")

    rng = np.random.default_rng(seed)
    classes = np.empty(n_images, dtype=np.int64)
    splits: dict[str, np.ndarray] = {}
    start = 0
    for name in SPLIT_NAMES:
        size = split_sizes[name]
        idx = np.arange(start, start + size)
        # cycle through the 16 classes, then shuffle within the split
        cls = np.arange(size) % N_CLASSES
        classes[idx] = cls[rng.permutation(size)]
        splits[name] = idx
        start += size

    shape_id = classes // N_COLORS
    color_id = classes % N_COLORS
    images = np.empty((n_images, H, W, C))
    for i in range(n_images):
        images[i] = _render(rng, int(shape_id[i]), int(color_id[i]))
    return SyntheticDataset(images, shape_id, color_id, splits, seed)


# ---------------------------------------------------------------------------
# dataset cache file: magic, header (N,H,W,C,seed), pixels, factors, splits


def save_dataset(path, ds: SyntheticDataset):
    with open(path, "wb") as f:
        f.write(b"AGDS")
        f.write(struct.pack("<QQQQq", ds.n_images, H, W, C, ds.seed))
        f.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.shape_id, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(ds.color_id, dtype="<i8").tobytes())
        for name in SPLIT_NAMES:
            idx = ds.splits[name]
            f.write(struct.pack("<Q", len(idx)))
            f.write(np.ascontiguousarray(idx, dtype="<i8").tobytes())


def load_dataset(path) -> SyntheticDataset:
    with open(path, "rb") as f:
        if f.read(4) != b"AGDS":
            raise ValueError("bad dataset cache magic")
        n, h, w, c, seed = struct.unpack("<QQQQq", f.read(40))
        if (h, w, c) != (H, W, C):
            raise ValueError(f"unsupported image geometry {(h, w, c)}")
        images = np.frombuffer(f.read(n * h * w * c * 8), dtype="<f8").reshape(n, h, w, c)
        shape_id = np.frombuffer(f.read(n * 8), dtype="<i8")
        color_id = np.frombuffer(f.read(n * 8), dtype="<i8")
        splits = {}
        for name in SPLIT_NAMES:
            (size,) = struct.unpack("<Q", f.read(8))
            splits[name] = np.frombuffer(f.read(size * 8), dtype="<i8").copy()
    return SyntheticDataset(images.copy(), shape_id.copy(), color_id.copy(), splits, seed)


# ---------------------------------------------------------------------------
# image transforms


def rotate_images(images: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        out[i] = np.rot90(images[i], int(k[i]), axes=(0, 1))
    return out


def apply_jigsaw(image: np.ndarray, perm_index: int) -> np.ndarray:
    perm = JIGSAW_PERMS[perm_index]
    hh, hw = H // 2, W // 2
    tiles = [
        image[:hh, :hw],
        image[:hh, hw:],
        image[hh:, :hw],
        image[hh:, hw:],
    ]
    out = np.empty_like(image)
    slots = [
        (slice(0, hh), slice(0, hw)),
        (slice(0, hh), slice(hw, W)),
        (slice(hh, H), slice(0, hw)),
        (slice(hh, H), slice(hw, W)),
    ]
    for slot, src in zip(slots, perm):
        out[slot] = tiles[src]
    return out


def _flatten(images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1)


# ---------------------------------------------------------------------------
# batch generators


def rotation_batch(images: np.ndarray, seed: int) -> Batch:
    if images.shape[1] != images.shape[2]:
        raise ValueError(f"rotation needs square images, got {images.shape[1:3]}")
    rng = np.random.default_rng(seed)
    k = rng.integers(0, 4, size=images.shape[0])
    rotated = rotate_images(images, k)
    return Batch(Tensor(_flatten(rotated)), "rotation", "classification", labels=k)


def jigsaw_batch(images: np.ndarray, seed: int) -> Batch:
    if images.shape[1] % 2 or images.shape[2] % 2:
        raise ValueError(f"jigsaw needs even dimensions, got {images.shape[1:3]}")
    rng = np.random.default_rng(seed)
    perms = rng.integers(0, len(JIGSAW_PERMS), size=images.shape[0])
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        out[i] = apply_jigsaw(images[i], int(perms[i]))
    return Batch(Tensor(_flatten(out)), "jigsaw", "classification", labels=perms)


def inpaint_batch(images: np.ndarray, seed: int) -> Batch:
    if images.shape[1] < 16 or images.shape[2] < 16:
        raise ValueError(f"inpainting needs >=16x16 images, got {images.shape[1:3]}")
    lo, hi = INPAINT_LO, INPAINT_HI
    masked = images.copy()
    target = images[:, lo:hi, lo:hi, :].reshape(images.shape[0], -1)
    masked[:, lo:hi, lo:hi, :] = 0.0
    return Batch(
        Tensor(_flatten(masked)), "inpaint", "reconstruction",
        recon_target=Tensor(target),
    )


def contrastive_batch(
    images: np.ndarray,
    seed: int,
    noise_sigma: float = 0.05,
    flip: bool = True,
    scale_range: tuple[float, float] = (0.8, 1.2),
) -> Batch:
    b = images.shape[0]
    if b < 4:
        raise ValueError(f"contrastive batch needs >= 4 images, got {b}")
    rng = np.random.default_rng(seed)
    views = np.empty((2 * b,) + images.shape[1:])
    for i in range(b):
        for v in range(2):
            img = images[i]
            if flip and rng.random() < 0.5:
                img = img[:, ::-1, :]
            scale = rng.uniform(scale_range[0], scale_range[1], size=(1, 1, C))
            img = img * scale
            if noise_sigma > 0:
                img = img + rng.normal(0.0, noise_sigma, size=img.shape)
            views[2 * i + v] = np.clip(img, 0.0, 1.0)
    pairing = np.arange(2 * b)
    pairing[0::2] += 1
    pairing[1::2] -= 1
    return Batch(Tensor(_flatten(views)), "contrastive", "contrastive", pairing=pairing)


def color_batch(images: np.ndarray, color_ids: np.ndarray, seed: int) -> Batch:
    """Dominant-hue classification on pixel-shuffled images (shape-blind)."""
    rng = np.random.default_rng(seed)
    flat = _flatten(images).reshape(images.shape[0], H * W, C)
    out = np.empty_like(flat)
    for i in range(images.shape[0]):
        out[i] = flat[i][rng.permutation(H * W)]
    return Batch(
        Tensor(out.reshape(images.shape[0], -1)), "color", "classification",
        labels=np.asarray(color_ids, dtype=np.int64),
    )


def target_batch(ds: SyntheticDataset, split: str, indices: np.ndarray) -> Batch:
    if split not in ("train", "test"):
        raise ValueError(f"target task needs a labeled split, got '{split}'")
    idx = ds.splits[split][indices]
    return Batch(
        Tensor(_flatten(ds.images[idx])), "target", "classification",
        labels=ds.target_label[idx],
    )


def make_proxy_batch(task: ProxyTaskSpec, ds: SyntheticDataset,
                     indices: np.ndarray, seed: int) -> Batch:
    idx = ds.splits["pretrain"][indices]
    images = ds.images[idx]
    if task.task_id == "rotation":
        return rotation_batch(images, seed)
    if task.task_id == "jigsaw":
        return jigsaw_batch(images, seed)
    if task.task_id == "inpaint":
        return inpaint_batch(images, seed)
    if task.task_id == "contrastive":
        return contrastive_batch(images, seed)
    if task.task_id == "color":
        return color_batch(images, ds.color_id[idx], seed)
    raise ValueError(f"unknown proxy task '{task.task_id}'")


# ---------------------------------------------------------------------------
# NT-Xent contrastive loss


def ntxent_loss(features: Tensor, pairing: np.ndarray, temperature: float = 0.5) -> Tensor:
    """Normalized-temperature cross entropy over cosine similarities.

    Mean over all 2b anchors of -log softmax of the positive's similarity,
    self-similarity excluded from the denominator.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = features.values.shape[0]
    pairing = np.asarray(pairing)
    if pairing.shape != (n,) or np.any(pairing[pairing] != np.arange(n)):
        raise ValueError("pairing must be a perfect matching over the views")

    z = T.l2_normalize_rows(features)
    logits = T.matmul(z, T.transpose(z)) * Tensor(1.0 / temperature)
    # mask self-similarity out of the log-sum-exp
    logits = logits + Tensor(np.where(np.eye(n, dtype=bool), -1e9, 0.0))

    # log-sum-exp with a detached row max: value exact, gradient unaffected
    row_max = Tensor(logits.values.max(axis=1, keepdims=True))
    lse = T.log(T.tsum(T.exp(logits - row_max), axis=1, keepdims=True)) + row_max

    pos_mask = np.zeros((n, n))
    pos_mask[np.arange(n), pairing] = 1.0
    pos = T.tsum(logits * Tensor(pos_mask), axis=1, keepdims=True)
    return T.tmean(lse - pos)
