"""Small dense-tensor library with reverse-mode automatic differentiation.

Values live in float64 numpy arrays. Every primitive returns a new
:class:`Tensor` that remembers its parents and a vector-Jacobian rule;
:func:`backward` walks the recorded nodes in reverse topological order.

Shape handling is deliberately strict: apart from adding a bias vector over
the trailing axis, operands must agree exactly. Reshaping, expanding and
slicing are explicit primitives.
"""
from __future__ import annotations

import enum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CLAMP = 700.0
_LOG_FLOOR = float(np.exp(-CLAMP))


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


class Axis(str, enum.Enum):
    """Normalisation axis for :func:`softmax_axis`.

    For ``[T, R]`` or ``[B, T, R]`` score tensors, TIME is the step axis and
    PATH is the trailing per-submission axis.
    """

    TIME = "time"
    PATH = "path"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and an optional stream id.

    Philox is keyed, not stateful across processes, so two calls with the same
    arguments always yield the same draws.
    """
    key = int(seed) & ((1 << 64) - 1)
    for s in stream:
        key = (key << 32) ^ (int(s) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key & ((1 << 128) - 1)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), vjp=None):
        arr = np.array(data, dtype=np.float64) if op == "leaf" else np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value produced by {op!r}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    return Tensor(data, op=op, parents=parents, vjp=vjp)


def custom_op(name: str, forward: Callable[..., np.ndarray],
              vjp: Callable[..., tuple[np.ndarray, ...]], *inputs: Tensor) -> Tensor:
    """Register a one-off primitive; ``vjp(g, *input_arrays)`` returns input grads."""
    inputs = tuple(as_tensor(t) for t in inputs)
    arrays = [t.data for t in inputs]
    out = forward(*arrays)
    return _node(out, name, inputs, lambda g: vjp(g, *arrays))


# --- primitives -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has rank >= 1 (contracts the last axis)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        ga = g @ B.T
        gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(A @ B, "matmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the trailing axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return _node(a.data + b.data, "add", (a, b),
                     lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))
    raise ShapeError(f"add: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _node(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of nothing")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in ts]} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), "concat", ts, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError(f"stack: shapes differ {[t.shape for t in ts]}")
    ax = axis % (ts[0].ndim + 1)

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _node(np.stack([t.data for t in ts], axis=ax), "stack", ts, vjp)


def take(t: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    t = as_tensor(t)
    ax = axis % t.ndim
    if not 0 <= index < t.shape[ax]:
        raise ShapeError(f"take: index {index} out of range for axis {axis} of {t.shape}")
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        out[tuple(sl)] = g
        return (out,)

    return _node(np.take(t.data, index, axis=ax), "take", (t,), vjp)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    try:
        data = t.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {tuple(shape)}") from exc
    return _node(data, "reshape", (t,), lambda g: (g.reshape(old),))


def expand_last(t: Tensor, n: int) -> Tensor:
    """Append a trailing axis of length ``n`` by repetition."""
    t = as_tensor(t)
    data = np.repeat(t.data[..., None], n, axis=-1)
    return _node(data, "expand_last", (t,), lambda g: (g.sum(axis=-1),))


def sigmoid(t: Tensor) -> Tensor:
    t = as_tensor(t)
    x = np.clip(t.data, -CLAMP, CLAMP)
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(y, "sigmoid", (t,), lambda g: (g * y * (1.0 - y),))


def tanh(t: Tensor) -> Tensor:
    t = as_tensor(t)
    y = np.tanh(t.data)
    return _node(y, "tanh", (t,), lambda g: (g * (1.0 - y * y),))


def exp(t: Tensor) -> Tensor:
    t = as_tensor(t)
    inside = np.abs(t.data) <= CLAMP
    y = np.exp(np.clip(t.data, -CLAMP, CLAMP))
    return _node(y, "exp", (t,), lambda g: (g * y * inside,))


def log(t: Tensor) -> Tensor:
    t = as_tensor(t)
    x = t.data
    if np.any(x < 0):
        raise NumericError("log of a negative value")
    inside = x >= _LOG_FLOOR
    xc = np.maximum(x, _LOG_FLOOR)
    return _node(np.log(xc), "log", (t,), lambda g: (g / xc * inside,))


def _axis_index(t: Tensor, axis: Axis | str) -> int:
    axis = Axis(axis)
    if t.ndim not in (2, 3):
        raise ShapeError(f"softmax_axis expects rank 2 or 3, got shape {t.shape}")
    return t.ndim - 2 if axis is Axis.TIME else t.ndim - 1


def softmax_axis(t: Tensor, axis: Axis | str, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the TIME or PATH axis of a ``[T, R]`` / ``[B, T, R]`` tensor.

    Entries where ``mask`` is false are excluded from normalisation and come out
    as exactly zero; a slice with no unmasked entries is all zeros.
    """
    t = as_tensor(t)
    ax = _axis_index(t, axis)
    x = t.data
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != x.shape:
            raise ShapeError(f"softmax mask {m.shape} vs scores {x.shape}")
    shifted = np.where(m, x, -np.inf)
    top = np.max(shifted, axis=ax, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(m, np.exp(np.clip(x - top, -CLAMP, CLAMP)), 0.0)
    denom = e.sum(axis=ax, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _node(y, "softmax", (t,), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    rows = table.shape

    def vjp(g):
        out = np.zeros(rows)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, rows[1]))
        return (out,)

    return _node(table.data[idx], "embedding", (table,), vjp)


def dropout(t: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rng=None`` or ``p == 0`` is the identity (evaluation mode)."""
    t = as_tensor(t)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate {p} outside [0, 1)")
    if rng is None or p == 0.0:
        return t
    keep = (rng.random(t.shape) >= p) / (1.0 - p)
    return _node(t.data * keep, "dropout", (t,), lambda g: (g * keep,))


def sum(t: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    t = as_tensor(t)
    shape = t.shape
    if axis is None:
        return _node(t.data.sum(), "sum", (t,), lambda g: (np.full(shape, float(g)),))
    ax = axis % t.ndim
    return _node(t.data.sum(axis=ax), "sum", (t,),
                 lambda g: (np.repeat(np.expand_dims(g, ax), shape[ax], axis=ax),))


def mean(t: Tensor) -> Tensor:
    t = as_tensor(t)
    shape, n = t.shape, t.data.size
    return _node(t.data.mean(), "mean", (t,), lambda g: (np.full(shape, float(g) / n),))


def bce_masked(p: Tensor, target, mask, eps: float = 1e-9) -> Tensor:
    """Mean binary cross-entropy over entries where ``mask`` is set.

    Probabilities are clamped to ``[eps, 1 - eps]``; the clamp passes no gradient.
    """
    p = as_tensor(p)
    y = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if y.shape != p.shape or m.shape != p.shape:
        raise ShapeError(f"bce: p {p.shape}, target {y.shape}, mask {m.shape}")
    n = m.sum()
    if n <= 0:
        raise ShapeError("bce: mask selects no entries")
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    loss = -(m * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))).sum() / n

    def vjp(g):
        return (float(g) * m * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n,)

    return _node(loss, "bce", (p,), vjp)


# --- graphs -----------------------------------------------------------------

def _topological(out: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(out, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack_.append((p, False))
    return order


class Graph:
    """A traced computation: ``fn(**bindings) -> Tensor``.

    :meth:`forward` runs ``fn`` and records the node list in topological order
    (inputs always precede their consumers).
    """

    def __init__(self, fn: Callable[..., Tensor], inputs: Iterable[str] | None = None):
        self.fn = fn
        self.inputs = tuple(inputs) if inputs is not None else None
        self.nodes: list[Tensor] = []
        self.output: Tensor | None = None

    def forward(self, bindings: Mapping[str, Tensor]) -> Tensor:
        if self.inputs is not None:
            missing = [k for k in self.inputs if k not in bindings]
            if missing:
                raise GraphError(f"unbound graph inputs: {missing}")
        out = self.fn(**bindings)
        if not isinstance(out, Tensor):
            raise GraphError("graph function must return a Tensor")
        self.output = out
        self.nodes = _topological(out)
        return out

    def backward(self, loss: Tensor | None = None) -> None:
        if self.output is None:
            raise GraphError("backward called before forward")
        loss = self.output if loss is None else loss
        if loss is not self.output and not any(n is loss for n in self.nodes):
            raise GraphError("loss node is not part of this graph")
        _run_backward(loss, _topological(loss))


def forward(graph: Graph, bindings: Mapping[str, Tensor]) -> Tensor:
    return graph.forward(bindings)


def _run_backward(loss: Tensor, nodes: list[Tensor]) -> None:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def backward(target: Graph | Tensor, loss: Tensor | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if isinstance(target, Graph):
        target.backward(loss)
    else:
        _run_backward(target, _topological(target))


def grad_check(graph: Graph, bindings: Mapping[str, Tensor], eps: float = 1e-5) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    Every binding with ``requires_grad`` is checked element by element. The
    graph function must be deterministic (seed any dropout identically per call).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: v for k, v in bindings.items() if isinstance(v, Tensor) and v.requires_grad}
    for p in params.values():
        p.zero_grad()
    loss = graph.forward(bindings)
    graph.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = graph.forward(bindings).item()
            flat[i] = orig - eps
            down = graph.forward(bindings).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, abs(ga[i] - numeric) / max(1.0, abs(numeric)))
    graph.forward(bindings)
    return worst
