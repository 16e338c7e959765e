"""Dense 2-D array math with reverse-mode differentiation.

Every value is a float64 matrix held by a :class:`Node`.  Operations build a
dynamic graph; :func:`backward` walks it in reverse topological order and
accumulates gradients into every node that requires one.  The graph is rebuilt
for every file, so sequence lengths can vary freely.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_CHECKED = False
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid static configuration (e.g. pooling stride)."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an operation produces NaN or Inf."""


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Reject non-finite values at creation time while the context is active."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = prev


@contextlib.contextmanager
def no_grad():
    """Build values only; no backward closures are recorded."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("value", "_grad", "parents", "backward_fn", "op", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, op="const",
                 requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim != 2:
            raise DimensionError(f"{op}: expected a 2-D array, got shape {value.shape}")
        if _CHECKED and not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        self.value = value
        self._grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # operator sugar for tests and small graphs
    def __add__(self, other):
        return add(self, _as_node(other))

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __mul__(self, other):
        return mul(self, _as_node(other))

    def __matmul__(self, other):
        return matmul(self, _as_node(other))


def constant(value) -> Node:
    return Node(value)


def parameter(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64), op="param", requires_grad=True, name=name)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents: Sequence[Node], backward_fn, op: str) -> Node:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Node(value, parents if req else (), backward_fn if req else None, op, req)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def transpose(a: Node) -> Node:
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Node, b: Node) -> Node:
    """Hadamard product."""
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Node) -> Node:
    # derivative at exactly 0 is 0
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def concat_cols(nodes: Sequence[Node]) -> Node:
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row mismatch {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])
    value = np.concatenate([n.value for n in nodes], axis=1)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _make(value, tuple(nodes), back, "concat_cols")


def concat_rows(nodes: Sequence[Node]) -> Node:
    cols = {n.shape[1] for n in nodes}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column mismatch {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])
    value = np.concatenate([n.value for n in nodes], axis=0)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _make(value, tuple(nodes), back, "concat_rows")


def slice_rows(a: Node, start: int, stop: int) -> Node:
    n = a.shape[0]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for shape {a.shape}")

    def back(g):
        out = np.zeros_like(a.value)
        out[start:stop] = g
        return (out,)

    return _make(a.value[start:stop].copy(), (a,), back, "slice_rows")


def slice_cols(a: Node, start: int, stop: int) -> Node:
    n = a.shape[1]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for shape {a.shape}")

    def back(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return (out,)

    return _make(a.value[:, start:stop].copy(), (a,), back, "slice_cols")


def take_rows(a: Node, index: Sequence[int]) -> Node:
    """Gather rows by integer index (repeats allowed; gradients scatter-add)."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"take_rows: index out of range for shape {a.shape}")

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), back, "take_rows")


def broadcast_rows(v: Node, n: int) -> Node:
    """Repeat a 1 x c row vector into an n x c matrix."""
    if v.shape[0] != 1:
        raise DimensionError(f"broadcast_rows: expected a row vector, got {v.shape}")
    return _make(np.repeat(v.value, n, axis=0), (v,),
                 lambda g: (g.sum(axis=0, keepdims=True),), "broadcast_rows")


def diag(a: Node) -> Node:
    """Diagonal of a square matrix as a 1 x n row."""
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"diag: expected a square matrix, got {a.shape}")
    n = a.shape[0]

    def back(g):
        return (np.diag(g.ravel()),)

    return _make(np.diag(a.value).reshape(1, n).copy(), (a,), back, "diag")


def masked_zero(a: Node, rows: Sequence[int] = (), cols: Sequence[int] = ()) -> Node:
    """Zero out the given rows and columns; those positions get zero gradient."""
    keep = np.ones_like(a.value)
    keep[list(rows), :] = 0.0
    keep[:, list(cols)] = 0.0
    return _make(a.value * keep, (a,), lambda g: (g * keep,), "masked_zero")


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    shape = a.value.shape
    if axis is None:
        return _make(a.value.sum(), (a,), lambda g: (np.full(shape, g.item()),), "sum")
    value = a.value.sum(axis=axis, keepdims=True)
    if axis == 1:
        value = value.T  # keep results as rows: n x 1 -> 1 x n
    return _make(value, (a,), lambda g: (np.broadcast_to(g.T if axis == 1 else g, shape).copy(),),
                 "sum")


def mean(a: Node, axis: int | None = None) -> Node:
    count = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def sum_pool_1d(v: Node, stride: int) -> Node:
    """Non-overlapping sum pooling of a 1 x k row with the given stride."""
    if v.shape[0] != 1:
        raise DimensionError(f"sum_pool_1d: expected a row vector, got {v.shape}")
    k = v.shape[1]
    if stride < 1 or k % stride:
        raise ConfigError(f"sum_pool_1d: length {k} is not divisible by stride {stride}")
    out = v.value.reshape(k // stride, stride).sum(axis=1).reshape(1, -1)
    return _make(out, (v,), lambda g: (np.repeat(g, stride, axis=1),), "sum_pool_1d")


def layer_norm_rows(a: Node, eps: float = 1e-5) -> Node:
    """Normalize every row to zero mean and unit variance (no affine terms)."""
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), back, "layer_norm_rows")


def dropout(a: Node, rate: float, rng: np.random.Generator | None, train: bool) -> Node:
    """Inverted dropout: scale survivors by 1/(1-rate) during training only."""
    if not train or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.value * keep, (a,), lambda g: (g * keep,), "dropout")


BCE_EPS = 1e-7


def weighted_bce(p: Node, label: float, pos_weight: float = 1.0) -> Node:
    """-(w*y*log p + (1-y)*log(1-p)) with p clamped to [eps, 1-eps]."""
    if p.shape != (1, 1):
        raise DimensionError(f"weighted_bce: expected a scalar, got {p.shape}")
    raw = p.value.item()
    pc = min(max(raw, BCE_EPS), 1.0 - BCE_EPS)
    y = float(label)
    loss = -(pos_weight * y * math.log(pc) + (1.0 - y) * math.log(1.0 - pc))
    # clamping blocks the gradient outside the admissible interval
    if BCE_EPS <= raw <= 1.0 - BCE_EPS:
        d = -pos_weight * y / pc + (1.0 - y) / (1.0 - pc)
    else:
        d = 0.0
    return _make(loss, (p,), lambda g: (g * d,), "weighted_bce")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, seed: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    g0 = np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=np.float64)
    # intermediate gradients live in a side table; leaves accumulate into .grad
    grads: dict[int, np.ndarray] = {id(loss): g0}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, params: Iterable[Node], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.value.shape:
                raise DimensionError(f"adam: gradient {g.shape} vs parameter {p.value.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def gradient_check(f: Callable[[], Node], params: Sequence[Node], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the graph from ``params`` on every call and return a
    1 x 1 node.  Runs in checked mode, so a non-finite intermediate raises
    :class:`NonFiniteError` naming the op that produced it.
    """
    with checked():
        for p in params:
            p.zero_grad()
        out = f()
        if out.shape != (1, 1):
            raise DimensionError(f"gradient_check: f must return a scalar, got {out.shape}")
        backward(out)
        analytic = [p.grad.copy() for p in params]
        worst = 0.0
        for p, a in zip(params, analytic):
            flat = p.value.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().value.item()
                flat[i] = orig - h
                fm = f().value.item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * h)
            if flat.size:
                worst = max(worst, float(relative_error(a.reshape(-1), numeric).max()))
        for p in params:
            p.zero_grad()
    return worst
