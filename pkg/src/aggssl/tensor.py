"""Minimal reverse-mode autodiff over float64 numpy buffers.

Every operation records a backward closure on the tensors it produces;
``backward`` walks the resulting graph in reverse topological order.
Forward math is plain numpy, which on a fixed platform is deterministic
for identical inputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "matmul",
    "relu",
    "softmax_cross_entropy",
    "mse_loss",
    "l2_normalize_rows",
    "backward",
    "Adam",
]

EPS_NORM = 1e-12


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """An n-d float64 array, optionally tracked on the gradient graph."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def on_tape(self) -> bool:
        return self._backward_fn is not None or self.requires_grad

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the recording helpers below
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if any(p.on_tape for p in parents):
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray):
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.values.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values + b.values)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values - b.values)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values * b.values)

    def bwd(g):
        _accum(a, g * b.values)
        _accum(b, g * a.values)

    return _record(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.values / b.values)

    def bwd(g):
        _accum(a, g / b.values)
        _accum(b, -g * a.values / (b.values * b.values))

    return _record(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got shapes {a.values.shape} and {b.values.shape}"
        )
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.values.shape} x {b.values.shape}"
        )
    out = Tensor(a.values @ b.values)

    def bwd(g):
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    return _record(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.values.T)

    def bwd(g):
        _accum(a, g.T)

    return _record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0.0))

    def bwd(g):
        # subgradient at 0 taken as 0
        _accum(a, g * (a.values > 0.0))

    return _record(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    ev = np.exp(a.values)
    out = Tensor(ev)

    def bwd(g):
        _accum(a, g * ev)

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.values))

    def bwd(g):
        _accum(a, g / a.values)

    return _record(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    sv = np.sqrt(a.values)
    out = Tensor(sv)

    def bwd(g):
        _accum(a, g * 0.5 / sv)

    return _record(out, (a,), bwd)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.values * a.values)

    def bwd(g):
        _accum(a, g * 2.0 * a.values)

    return _record(out, (a,), bwd)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            _accum(a, np.full_like(a.values, 1.0) * g)
        else:
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.values.shape))

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


# ---------------------------------------------------------------------------
# losses and row normalization


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true classes.

    Fused primitive: the backward pass is the familiar (softmax - onehot)/n.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.values.ndim != 2:
        raise ValueError(f"logits must be 2-d, got shape {logits.values.shape}")
    n, c = logits.values.shape
    if n < 1:
        raise ValueError("need at least one sample")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} incompatible with {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(
            f"label out of range: values must lie in [0, {c}), got "
            f"min={labels.min()} max={labels.max()}"
        )
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    out = Tensor(nll.mean())

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        _accum(logits, grad * (float(g) / n))

    return _record(out, (logits,), bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    target = _wrap(target)
    if pred.values.shape != target.values.shape:
        raise ValueError(
            f"mse_loss shape mismatch: {pred.values.shape} vs {target.values.shape}"
        )
    return tmean(square(sub(pred, target)))


def l2_normalize_rows(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ValueError(f"expected 2-d input, got shape {x.values.shape}")
    norms = np.sqrt((x.values * x.values).sum(axis=1))
    bad = np.nonzero(norms < EPS_NORM)[0]
    if bad.size:
        raise ValueError(f"row {int(bad[0])} has near-zero norm ({norms[bad[0]]:.3e})")
    sq = tsum(square(x), axis=1, keepdims=True)
    return div(x, sqrt(sq))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor):
    """Populate ``grad`` on every reachable tensor with requires_grad=True.

    Visits every recorded node exactly once (reverse topological order) and
    releases the graph afterwards, so a second backward through the same
    loss is rejected (the loss comes back detached).
    """
    if loss.values.ndim != 0 and loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    if not loss.on_tape:
        raise ValueError("loss is detached from the gradient tape")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.on_tape:
                stack.append((p, False))

    # seed, then let each node's closure push into parent .grad buffers;
    # intermediates use .grad as scratch and are wiped when the tape clears
    if loss.grad is None:
        loss.grad = np.ones_like(loss.values)
    else:
        loss.grad = loss.grad + np.ones_like(loss.values)

    for node in reversed(order):
        if node._backward_fn is None or node.grad is None:
            continue
        node._backward_fn(node.grad)

    for node in order:
        if not node.requires_grad:
            node.grad = None
        node._parents = ()
        node._backward_fn = None


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient in parameter {i} at step {self.t}"
                )
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / (1.0 - b1 ** self.t)
            v_hat = self.v[i] / (1.0 - b2 ** self.t)
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
