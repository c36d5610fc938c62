"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D ``Node``. Primitives build the graph eagerly (the
forward value is computed on construction) and register a closure that
pushes the output gradient back into the parents. ``backward`` walks the
graph in reverse topological order.

Broadcasting is limited to row-broadcast: the second operand of an
elementwise op may have shape ``(1, cols)`` or ``(1, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Node:
    """A matrix value in the computation graph."""

    __slots__ = ("data", "grad", "op", "parents", "requires_grad", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents: tuple = ()):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"nodes hold 2-D matrices, got ndim={arr.ndim}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 node, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)
        self._backward_done = False

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def constant(data) -> Node:
    return Node(data, requires_grad=False, op="const")


def parameter(data) -> Node:
    return Node(data, requires_grad=True, op="param")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(data: np.ndarray, op: str, parents: tuple) -> Node:
    out = Node(data, requires_grad=any(p.requires_grad for p in parents), op=op, parents=parents)
    return out


def _acc(node: Node, g: np.ndarray) -> None:
    if node.requires_grad:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    return g.sum(axis=0, keepdims=True)


def _check_elementwise(a: Node, b: Node, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.shape == (1, 1) or (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, "matmul", (a, b))

    def _bw():
        _acc(a, out.grad @ b.data.T)
        _acc(b, a.data.T @ out.grad)

    out._backward = _bw
    return out


def add(a: Node, b: Node) -> Node:
    _check_elementwise(a, b, "add")
    out = _make(a.data + b.data, "add", (a, b))

    def _bw():
        _acc(a, out.grad)
        _acc(b, _unbroadcast(out.grad, b.shape))

    out._backward = _bw
    return out


def sub(a: Node, b: Node) -> Node:
    _check_elementwise(a, b, "sub")
    out = _make(a.data - b.data, "sub", (a, b))

    def _bw():
        _acc(a, out.grad)
        _acc(b, -_unbroadcast(out.grad, b.shape))

    out._backward = _bw
    return out


def mul(a: Node, b: Node) -> Node:
    """Elementwise (Hadamard) product."""
    _check_elementwise(a, b, "mul")
    out = _make(a.data * b.data, "mul", (a, b))

    def _bw():
        _acc(a, out.grad * b.data)
        _acc(b, _unbroadcast(out.grad * a.data, b.shape))

    out._backward = _bw
    return out


def scale(a: Node, c: float) -> Node:
    out = _make(a.data * c, "scale", (a,))

    def _bw():
        _acc(a, out.grad * c)

    out._backward = _bw
    return out


def exp(a: Node) -> Node:
    out = _make(np.exp(a.data), "exp", (a,))

    def _bw():
        _acc(a, out.grad * out.data)

    out._backward = _bw
    return out


def log(a: Node) -> Node:
    if np.any(a.data <= 0):
        bad = np.argwhere(a.data <= 0)[0]
        raise ValueError(f"log of non-positive value {a.data[tuple(bad)]!r} at {tuple(bad)}; use clamped_log")
    out = _make(np.log(a.data), "log", (a,))

    def _bw():
        _acc(a, out.grad / a.data)

    out._backward = _bw
    return out


def clamped_log(a: Node, floor: float = LOG_FLOOR) -> Node:
    """log(max(a, floor)); zero gradient where the floor is active."""
    clipped = np.maximum(a.data, floor)
    active = a.data > floor
    out = _make(np.log(clipped), "clamped_log", (a,))

    def _bw():
        _acc(a, np.where(active, out.grad / clipped, 0.0))

    out._backward = _bw
    return out


def relu(a: Node) -> Node:
    mask = a.data > 0
    out = _make(np.where(mask, a.data, 0.0), "relu", (a,))

    def _bw():
        _acc(a, out.grad * mask)

    out._backward = _bw
    return out


def transpose(a: Node) -> Node:
    out = _make(a.data.T.copy(), "transpose", (a,))

    def _bw():
        _acc(a, out.grad.T)

    out._backward = _bw
    return out


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    if axis is None:
        out = _make(a.data.sum().reshape(1, 1), "sum", (a,))
    else:
        out = _make(a.data.sum(axis=axis, keepdims=True), "sum", (a,))

    def _bw():
        _acc(a, np.broadcast_to(out.grad, a.shape))

    out._backward = _bw
    return out


def mean(a: Node, axis: int | None = None) -> Node:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def softmax(a: Node) -> Node:
    """Row-wise softmax."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = _make(s, "softmax", (a,))

    def _bw():
        g = out.grad
        _acc(a, s * (g - (g * s).sum(axis=1, keepdims=True)))

    out._backward = _bw
    return out


def logsumexp(a: Node) -> Node:
    """Row-wise log-sum-exp, shifted by the row max. Returns (rows, 1)."""
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    tot = e.sum(axis=1, keepdims=True)
    out = _make(np.log(tot) + m, "logsumexp", (a,))

    def _bw():
        _acc(a, out.grad * (e / tot))

    out._backward = _bw
    return out


def l2_normalize(a: Node) -> Node:
    """Row-wise l2 normalisation. Zero rows stay zero and pass no gradient."""
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    nz = norms > 0
    safe = np.where(nz, norms, 1.0)
    y = np.where(nz, a.data / safe, 0.0)
    out = _make(y, "l2_normalize", (a,))

    def _bw():
        g = out.grad
        proj = (g * y).sum(axis=1, keepdims=True)
        _acc(a, np.where(nz, (g - y * proj) / safe, 0.0))

    out._backward = _bw
    return out


def cosine_matrix(a: Node, b: Node) -> Node:
    """Cosine similarity of every row of ``a`` against every row of ``b``."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: column counts differ, {a.shape} vs {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def take_rows(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    out = _make(a.data[idx], "take_rows", (a,))

    def _bw():
        if a.requires_grad:
            np.add.at(a.grad, idx, out.grad)

    out._backward = _bw
    return out


def concat(nodes: Sequence[Node], axis: int = 1) -> Node:
    nodes = tuple(nodes)
    other = 1 - axis
    if len({n.shape[other] for n in nodes}) != 1:
        raise ShapeError(f"concat(axis={axis}): mismatched shapes {[n.shape for n in nodes]}")
    out = _make(np.concatenate([n.data for n in nodes], axis=axis), "concat", nodes)
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def _bw():
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            _acc(n, out.grad[:, lo:hi] if axis == 1 else out.grad[lo:hi, :])

    out._backward = _bw
    return out


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "log": log,
    "clamped_log": clamped_log,
    "softmax": softmax,
    "l2_normalize": l2_normalize,
    "sum": sum,
    "mean": mean,
    "cosine_matrix": cosine_matrix,
    "logsumexp": logsumexp,
    "relu": relu,
    "transpose": transpose,
}


def primitive_forward(op: str, inputs: Sequence[Node], *args) -> Node:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, *args)


# ---------------------------------------------------------------- backward


def topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    if root.shape != (1, 1):
        raise GraphError(f"backward needs a scalar (1x1) root, got {root.shape}")
    if root._backward_done:
        raise GraphError("backward already ran on this graph; call zero_grad() first")
    if not root.requires_grad:
        root._backward_done = True
        return
    order = topo_order(root)
    for node in order:
        if node._backward is not None:
            node.grad = np.zeros_like(node.data)
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
    root._backward_done = True


def zero_grad(params: Sequence[Node]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tolerance: float = 1e-3
    abs_floor: float = 1e-6
    bad_coordinate: tuple | None = None

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{self.op_name:<24s} rel={self.max_rel_error:.3e} abs={self.max_abs_error:.3e} {flag}"


def finite_diff_check(
    f: Callable[..., Node],
    point,
    step: float = 1e-4,
    tol: float = 1e-3,
    abs_floor: float = 1e-6,
    name: str = "f",
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``point`` is one matrix or a sequence of matrices; ``f`` receives one
    leaf node per matrix and must return a 1x1 node. The relative error of a
    coordinate is taken only where the gradient magnitude exceeds
    ``abs_floor``; every coordinate contributes to the absolute error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = isinstance(point, np.ndarray) or not isinstance(point, (list, tuple))
    points = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]
    points = [p.reshape(1, -1) if p.ndim == 1 else p for p in points]

    def evaluate(mats):
        return f(*[constant(m) for m in mats]).item()

    leaves = [parameter(p.copy()) for p in points]
    with np.errstate(over="ignore", invalid="ignore"):
        out = f(*leaves)
        backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]
    for k, a in enumerate(analytic):
        bad = np.argwhere(~np.isfinite(a))
        if bad.size or not np.isfinite(out.item()):
            where = (k, *map(int, bad[0])) if bad.size else None
            return GradCheckReport(name, np.inf, np.inf, False, tol, abs_floor, where)

    max_rel = 0.0
    max_abs = 0.0
    for k, base in enumerate(points):
        for idx in np.ndindex(base.shape):
            plus = [p.copy() for p in points]
            minus = [p.copy() for p in points]
            plus[k][idx] += step
            minus[k][idx] -= step
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    fp, fm = evaluate(plus), evaluate(minus)
            except (ValueError, FloatingPointError):
                fp = fm = np.nan
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(name, np.inf, np.inf, False, tol, abs_floor, (k, *map(int, idx)))
            numeric = (fp - fm) / (2 * step)
            a = analytic[k][idx]
            err = abs(a - numeric)
            max_abs = max(max_abs, err)
            mag = max(abs(a), abs(numeric))
            if mag > abs_floor:
                max_rel = max(max_rel, err / mag)
    passed = max_rel <= tol or max_abs <= abs_floor
    return GradCheckReport(name, max_rel, max_abs, passed, tol, abs_floor)
