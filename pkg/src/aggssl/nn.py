"""MLP backbone, affine task heads, and the flat binary checkpoint format."""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .tensor import Tensor, matmul, relu, add

CHECKPOINT_MAGIC = b"AGSL"
CHECKPOINT_VERSION = 1

DEFAULT_WIDTHS = [768, 256, 128, 64]


def _init_matrix(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    # He-style scaling, suits the ReLU hidden layers
    scale = np.sqrt(2.0 / fan_in)
    return rng.standard_normal((fan_in, fan_out)) * scale


class MlpBackbone:
    """Fully connected feature extractor: ReLU hidden layers, linear output."""

    def __init__(self, layer_widths: list[int] | None = None, seed: int = 0):
        self.layer_widths = list(layer_widths or DEFAULT_WIDTHS)
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        rng = np.random.default_rng(seed)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            self.weights.append(Tensor(_init_matrix(rng, fan_in, fan_out), requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def feature_width(self) -> int:
        return self.layer_widths[-1]

    def forward(self, x: Tensor, tap: int | None = None) -> Tensor:
        """Activations after layer ``tap`` (1-based; default = final layer)."""
        if tap is None:
            tap = self.n_layers
        if not 1 <= tap <= self.n_layers:
            raise ValueError(f"layer tap {tap} out of range [1, {self.n_layers}]")
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(matmul(h, w), b)
            if i < self.n_layers - 1:
                h = relu(h)
            if i + 1 == tap:
                return h
        return h

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"backbone.w{i}"] = w
            named[f"backbone.b{i}"] = b
        return named


class Head:
    """Single affine layer from backbone features to task outputs."""

    def __init__(self, in_width: int, output_width: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.output_width = output_width
        self.weight = Tensor(_init_matrix(rng, in_width, output_width), requires_grad=True)
        self.bias = Tensor(np.zeros(output_width), requires_grad=True)

    def forward(self, features: Tensor) -> Tensor:
        return add(matmul(features, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# checkpoint format: "AGSL", version u32, then per tensor:
#   name_len u32, name utf-8, rank u32, dims u64 each, values f64 LE


def save_checkpoint(path, named_tensors: dict[str, Tensor | np.ndarray]):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, tensor in named_tensors.items():
            arr = tensor.values if isinstance(tensor, Tensor) else np.asarray(tensor)
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic: {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            header = f.read(4)
            if not header:
                break
            (name_len,) = struct.unpack("<I", header)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8")
            tensors[name] = data.reshape(shape).copy()
    return tensors


def parameter_hash(named_tensors: dict[str, Tensor]) -> str:
    """SHA-256 over names and raw little-endian buffers, in name order."""
    h = hashlib.sha256()
    for name in sorted(named_tensors):
        arr = named_tensors[name]
        arr = arr.values if isinstance(arr, Tensor) else np.asarray(arr)
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
