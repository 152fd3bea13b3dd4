"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: each operation returns a Node that records its parent nodes
and a vector-Jacobian closure. ``backward`` walks the recorded graph from a
scalar root and accumulates gradients. Everything is double precision so
central finite differences stay tight enough to check gradients against.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class ShapeMismatchError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""


class NonScalarRootError(ValueError):
    """Raised when backward is called on a non-scalar node."""


class GradCheckError(RuntimeError):
    """Raised when the function under a gradient check produces non-finite values."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Forward values still flow."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad", "op")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None  # lazily materialized on first accumulation
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Node:
    return Node(value, op="const")


def param(value) -> Node:
    return Node(value, requires_grad=True, op="param")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, vjp, op) -> Node:
    # Constant-only subgraphs are not recorded; backward never reaches them.
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, True, op)
    return Node(value, op=op)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeMismatchError(f"add: {a.value.shape} vs {b.value.shape}") from None

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _make(out, (a, b), vjp, "add")


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeMismatchError(f"sub: {a.value.shape} vs {b.value.shape}") from None

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _make(out, (a, b), vjp, "sub")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeMismatchError(f"mul: {a.value.shape} vs {b.value.shape}") from None

    def vjp(g):
        return _unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)

    return _make(out, (a, b), vjp, "mul")


def neg(a) -> Node:
    a = _as_node(a)

    def vjp(g):
        return (-g,)

    return _make(-a.value, (a,), vjp, "neg")


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-d operands: {a.value.shape} vs {b.value.shape}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeMismatchError(f"matmul: {a.value.shape} vs {b.value.shape}")
    out = a.value @ b.value

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def tanh(a) -> Node:
    a = _as_node(a)
    out = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp, "tanh")


def relu(a) -> Node:
    a = _as_node(a)
    out = np.maximum(a.value, 0.0)

    def vjp(g):
        return (g * (a.value > 0.0),)

    return _make(out, (a,), vjp, "relu")


def sigmoid(a) -> Node:
    a = _as_node(a)
    # branch on sign so exp never overflows
    out = np.where(a.value >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(a.value))),
                   np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp, "sigmoid")


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp, "exp")


def log(a) -> Node:
    a = _as_node(a)
    out = np.log(a.value)

    def vjp(g):
        return (g / a.value,)

    return _make(out, (a,), vjp, "log")


def pow_const(a, p: float) -> Node:
    a = _as_node(a)
    out = a.value ** p

    def vjp(g):
        return (g * p * a.value ** (p - 1.0),)

    return _make(out, (a,), vjp, "pow_const")


def softmax(a, axis: int = -1) -> Node:
    a = _as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Node:
    a = _as_node(a)
    m = a.value.max(axis=axis, keepdims=True)
    shifted = a.value - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp, "log_softmax")


def gather(a, index: Array, axis: int = -1) -> Node:
    """Pick elements along ``axis``; index has the same rank as the input
    and matches its shape on every other axis."""
    a = _as_node(a)
    index = np.asarray(index)
    if index.ndim != a.value.ndim:
        raise ShapeMismatchError(f"gather: index rank {index.ndim} vs input rank {a.value.ndim}")
    ax = axis % a.value.ndim
    for d in range(a.value.ndim):
        if d != ax and index.shape[d] != a.value.shape[d]:
            raise ShapeMismatchError(f"gather: index shape {index.shape} vs input {a.value.shape}")
    out = np.take_along_axis(a.value, index, axis=ax)

    def vjp(g):
        # Accumulate in gather-axis-last layout; duplicates along the axis
        # must add, so scatter with add.at on a contiguous buffer.
        gm = np.zeros(np.moveaxis(a.value, ax, -1).shape)
        moved_g = np.moveaxis(g, ax, -1)
        moved_i = np.moveaxis(index, ax, -1)
        rows = gm.reshape(-1, gm.shape[-1])
        ridx = np.repeat(np.arange(rows.shape[0]), moved_i.shape[-1])
        np.add.at(rows, (ridx, moved_i.reshape(-1)), moved_g.reshape(-1))
        return (np.ascontiguousarray(np.moveaxis(gm, -1, ax)),)

    return _make(out, (a,), vjp, "gather")


def embed(table, ids: Array) -> Node:
    """Row lookup ``table[ids]``; the usual token embedding gather."""
    table = _as_node(table)
    ids = np.asarray(ids)
    if table.value.ndim != 2:
        raise ShapeMismatchError(f"embed: table must be 2-d, got {table.value.shape}")
    out = table.value[ids]

    def vjp(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.value.shape[1]))
        return (gt,)

    return _make(out, (table,), vjp, "embed")


def concat(nodes, axis: int = 0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeMismatchError(f"concat: {[n.value.shape for n in nodes]}") from None
    sizes = [n.value.shape[axis] for n in nodes]

    def vjp(g):
        pieces = []
        start = 0
        for size in sizes:
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, start + size)
            pieces.append(g[tuple(key)])
            start += size
        return tuple(pieces)

    return _make(out, tuple(nodes), vjp, "concat")


def slice_(a, key) -> Node:
    """Basic indexing (ints and slices only), so the backward scatter is exact."""
    a = _as_node(a)
    out = a.value[key]

    def vjp(g):
        gx = np.zeros_like(a.value)
        gx[key] += g
        return (gx,)

    return _make(out, (a,), vjp, "slice")


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean_(a, axis=None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size / out.size

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy() / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy() / count,)

    return _make(out, (a,), vjp, "mean")


def reshape(a, shape) -> Node:
    a = _as_node(a)
    out = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(a.value.shape),)

    return _make(out, (a,), vjp, "reshape")


def transpose(a, axes) -> Node:
    a = _as_node(a)
    out = np.transpose(a.value, axes)
    inverse = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _make(out, (a,), vjp, "transpose")


_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "gather": gather,
    "concat": concat,
    "slice": slice_,
    "sum": sum_,
    "mean": mean_,
}


def forward_op(op_kind: str, inputs, **kwargs) -> Node:
    """Dispatch one primitive by name. ``inputs`` is a sequence of operands."""
    if op_kind not in _OPS:
        raise KeyError(f"unknown op kind: {op_kind!r}")
    fn = _OPS[op_kind]
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Node) -> list:
    order = []
    seen = set()
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


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node
    with requires_grad set. Repeated calls without zeroing accumulate."""
    if root.value.size != 1:
        raise NonScalarRootError(f"backward root must be scalar, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    # Propagate through a local table so rerunning backward is reproducible
    # regardless of what is already stored in .grad.
    flowing = {id(root): np.ones_like(root.value)}
    order = _topo_order(root)
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        # rebind, never mutate: .grad may alias a buffer still flowing
        node.grad = g if node.grad is None else node.grad + g
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = flowing.get(id(p))
            flowing[id(p)] = pg if acc is None else acc + pg


def zero_grad(nodes) -> None:
    for n in nodes:
        n.zero_grad()


# ---------------------------------------------------------------------------
# parameters and gradient checking


@dataclass(frozen=True)
class ParamBlock:
    """A named leaf parameter. Shape is fixed at construction."""

    name: str
    node: Node

    def __post_init__(self):
        if not self.node.requires_grad:
            raise ValueError(f"param block {self.name!r} must require grad")

    @property
    def shape(self):
        return self.node.value.shape


@dataclass
class GradCheckReport:
    max_rel_err: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)  # (name, flat_index, rel_err)
    worst: float = 0.0
    passed: bool = True

    def __str__(self):
        lines = [f"grad check: worst rel err {self.worst:.3e} passed={self.passed}"]
        for name, err in sorted(self.max_rel_err.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-4,
               max_entries_per_param: int | None = None, rng=None) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``f()`` against central
    finite differences, parameter entry by parameter entry.

    ``f`` must be a deterministic closure over ``params`` (a sequence of
    ParamBlocks). Relative error uses max(1, |a|, |b|) in the denominator so
    near-zero entries are judged on absolute error at unit scale.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps out of range: {eps}")
    for block in params:
        block.node.zero_grad()
    root = f()
    if root.value.size != 1:
        raise NonScalarRootError("grad_check target must be scalar")
    if not np.isfinite(root.value).all():
        raise GradCheckError("non-finite value from f() at the base point")
    backward(root)
    analytic = {}
    for block in params:
        g = block.node.grad
        analytic[block.name] = np.zeros_like(block.node.value) if g is None else g.copy()

    report = GradCheckReport()
    for block in params:
        flat = block.node.value.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = gen.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        ga = analytic[block.name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(f().value)
            flat[i] = orig - eps
            with no_grad():
                down = float(f().value)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(
                    f"non-finite value from f() while perturbing {block.name}[{i}]")
            fd = (up - down) / (2.0 * eps)
            a = ga[i]
            rel = abs(a - fd) / max(1.0, abs(a), abs(fd))
            if rel > worst:
                worst = rel
            if rel > tol:
                report.failures.append((block.name, int(i), float(rel)))
        report.max_rel_err[block.name] = float(worst)
        report.worst = max(report.worst, float(worst))
    report.passed = not report.failures
    return report
