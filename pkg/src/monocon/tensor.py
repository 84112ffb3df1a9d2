"""Dense float64 matrices with a tape-style reverse-mode autodiff.

Values are plain 2-D ``numpy.ndarray`` objects (float64, C order). A
:class:`Tensor` wraps one such value together with its gradient and the
closure that propagates gradients to its parents. Graphs are rebuilt on
every forward pass and discarded afterwards.

Reductions go through numpy's ``add.reduce`` on contiguous arrays, whose
pairwise summation order depends only on the array shape, so identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, DegenerateError, DimensionError, DomainError, GraphError

NORM_EPS = 1e-12
DEFAULT_ALPHA = 0.01

__all__ = [
    "Tensor",
    "as_matrix",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "square",
    "leaky_relu",
    "scale",
    "exp",
    "log",
    "add_row",
    "total",
    "row_l2_normalize",
    "backward",
    "reset",
]


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce external input to a finite, C-contiguous float64 matrix.

    One-dimensional input is read as a single row.
    """
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D matrix, got {arr.ndim}-D")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DataError(f"{name}: non-finite entry at row {bad[0]}, col {bad[1]}")
    return arr


class Tensor:
    """A node on the autodiff tape.

    Leaves are created directly; interior nodes come out of the op
    functions in this module. ``grad`` has the shape of ``value`` and is
    allocated (zeroed) by :func:`backward`.
    """

    __slots__ = ("value", "grad", "op", "parents", "_backward", "requires_grad", "_done")

    def __init__(self, value, requires_grad: bool = False, *, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None,
                 _checked: bool = False):
        self.value = value if _checked else as_matrix(value)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._done = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, op: str, parents, backward_fn) -> Tensor:
    return Tensor(np.ascontiguousarray(value), op=op, parents=parents,
                  backward_fn=backward_fn, _checked=True)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        return g @ bv.T, av.T @ g

    return _node(av @ bv, "matmul", (a, b), bw)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "add")
    return _node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "sub")
    return _node(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def square(a) -> Tensor:
    a = _lift(a)
    av = a.value
    return _node(av * av, "square", (a,), lambda g: (2.0 * av * g,))


def leaky_relu(a, alpha: float = DEFAULT_ALPHA) -> Tensor:
    a = _lift(a)
    pos = a.value > 0
    slope = np.where(pos, 1.0, alpha)
    return _node(a.value * slope, "leaky_relu", (a,), lambda g: (g * slope,))


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _node(a.value * c, "scale", (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.value)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.value <= 0):
        bad = np.argwhere(a.value <= 0)[0]
        raise DomainError(f"log: non-positive entry at row {bad[0]}, col {bad[1]}")
    av = a.value
    return _node(np.log(av), "log", (a,), lambda g: (g / av,))


_UNARY = {"square": square, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(a, kind: str, b=None, *, alpha: float = DEFAULT_ALPHA, c: float | None = None) -> Tensor:
    """Dispatch to one of the entrywise primitives by name."""
    if kind in _BINARY:
        if b is None:
            raise DimensionError(f"{kind}: needs a second operand")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "scale":
        if c is None:
            raise ValueError("scale: missing constant c")
        return scale(a, c)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add_row(a, row) -> Tensor:
    """Add a 1 x n row vector to every row of an m x n matrix."""
    a, row = _lift(a), _lift(row)
    if row.shape != (1, a.shape[1]):
        raise DimensionError(f"add_row: row {row.shape} does not fit matrix {a.shape}")

    def bw(g):
        return g, g.sum(axis=0, keepdims=True)

    return _node(a.value + row.value, "add_row", (a, row), bw)


def total(a) -> Tensor:
    """Sum of all entries as a 1 x 1 node."""
    a = _lift(a)
    shape = a.shape
    return _node(np.array([[a.value.sum()]]), "sum", (a,),
                 lambda g: (np.full(shape, g[0, 0]),))


def row_l2_normalize(a) -> Tensor:
    a = _lift(a)
    x = a.value
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    if np.any(norms < NORM_EPS):
        row = int(np.argmax(norms[:, 0] < NORM_EPS))
        raise DegenerateError(f"row_l2_normalize: row {row} has norm below {NORM_EPS:g}")
    y = x / norms

    def bw(g):
        # d(x/|x|) = (g - y <y, g>) / |x|
        dots = np.einsum("ij,ij->i", g, y)[:, None]
        return ((g - y * dots) / norms,)

    return _node(y, "normalize", (a,), bw)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) into ``grad`` of every node reachable from ``loss``.

    Returns a map from ``id(leaf)`` to the leaf's gradient. Calling twice on
    the same root without :func:`reset` raises :class:`GraphError`.
    """
    if loss.shape != (1, 1):
        raise GraphError(f"backward: root must be 1x1, got {loss.shape}")
    if loss._done:
        raise GraphError("backward: already run on this graph; call reset() first")
    order = _topo_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad[0, 0] = 1.0
    for node in reversed(order):
        if node._backward is None or not node.requires_grad:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if parent.requires_grad:
                parent.grad += g
    loss._done = True
    return {id(n): n.grad for n in order if not n.parents}


def reset(loss: Tensor) -> None:
    """Zero all gradients under ``loss`` and allow another backward pass."""
    for node in _topo_order(loss):
        node.grad = None
    loss._done = False


def leaves(loss: Tensor) -> Iterable[Tensor]:
    return [n for n in _topo_order(loss) if not n.parents]
