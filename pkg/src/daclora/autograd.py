"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output cotangent to parent cotangents. The graph is
rebuilt on every forward pass; :func:`backward` linearises it (the tape)
and walks it in reverse.

Broadcasting is deliberately limited to scalar-with-tensor and equal
shapes, plus the explicit :func:`add_bias` row broadcast.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class DomainError(ArithmeticError):
    """Raised when an op's numerical domain is violated (e.g. zero-norm rows)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.full(like.shape, g.sum())


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g, need):
        return (g @ B.T if need[0] else None, A.T @ g if need[1] else None)

    return _make(A @ B, (a, b), back, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g, need: (g.T,), "transpose")


def add_bias(x, bias) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {bias.shape} do not line up")

    def back(g, need):
        return g, g.sum(axis=0) if need[1] else None

    return _make(x.data + bias.data, (x, bias), back, "add_bias")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g, need: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g, need: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    A, B = a.data, b.data

    def back(g, need):
        return (_reduce_to(g * B, a) if need[0] else None,
                _reduce_to(g * A, b) if need[1] else None)

    return _make(A * B, (a, b), back, "mul")


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    return _make(a.data * k, (a,), lambda g, need: (g * k,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g, need: (g * mask,), "relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient flows only strictly inside the interval."""
    a = as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g, need: (g * inside,), "clamp")


def elementwise(kind: str, a, b=None, **params) -> Tensor:
    """Dispatch by name: add, sub, mul, scale(k), relu, clamp(lo, hi)."""
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    if kind == "scale":
        return scale(a, params["k"])
    if kind == "relu":
        return relu(a)
    if kind == "clamp":
        return clamp(a, params["lo"], params["hi"])
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g, need: (np.full(shape, float(g)),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g, need: (np.full(shape, float(g) / n),), "mean")


def l1_norm(g) -> float:
    """Sum of absolute values. Not differentiable; used on gradients only."""
    arr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    return float(np.abs(arr).sum())


# ---------------------------------------------------------------------------
# losses and similarities


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels.

    ``reduction="sum"`` gives per-example gradients on each row, which the
    attacks rely on when halting examples independently.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    n, c = logits.shape
    if c < 2:
        raise ValueError("cross_entropy needs at least two classes")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be integers in [0, {c})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    logp = log_softmax(logits.data)
    rows = np.arange(n)
    nll = -logp[rows, labels]
    denom = n if reduction == "mean" else 1

    def back(g, need):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / denom),)

    return _make(np.asarray(nll.sum() / denom), (logits,), back, "cross_entropy")


def row_normalize(a) -> Tensor:
    """Scale each row of a matrix to unit L2 norm."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row_normalize expects a matrix, got {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise DomainError("row_normalize: zero-norm row")
    out = a.data / norms

    def back(g, need):
        proj = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * proj) / norms,)

    return _make(out, (a,), back, "row_normalize")


def cosine_similarity(u, v) -> Tensor:
    """Row-wise cosine similarity of two (B, D) matrices."""
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 2 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: shapes {u.shape} and {v.shape}")
    U, V = u.data, v.data
    nu = np.sqrt((U * U).sum(axis=1))
    nv = np.sqrt((V * V).sum(axis=1))
    if np.any(nu == 0) or np.any(nv == 0):
        raise DomainError("cosine_similarity: zero-norm row")
    dot = (U * V).sum(axis=1)
    cos = dot / (nu * nv)

    def back(g, need):
        g = g[:, None]
        c = cos[:, None]
        gu = g * (V / (nu * nv)[:, None] - c * U / (nu * nu)[:, None]) if need[0] else None
        gv = g * (U / (nu * nv)[:, None] - c * V / (nv * nv)[:, None]) if need[1] else None
        return gu, gv

    return _make(cos, (u, v), back, "cosine_similarity")


# ---------------------------------------------------------------------------
# backward pass


def _tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes ending at ``loss``."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor]) -> None:
    """Write d(loss)/d(leaf) into ``leaf.grad`` for each requested leaf.

    Only the requested leaves receive a grad; every other tensor in the
    graph is left untouched, so computing an input gradient never disturbs
    parameter grad slots and vice versa.
    """
    leaves = list(leaves)
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _tape(loss)
    on_tape = {id(t) for t in order}
    for leaf in leaves:
        if id(leaf) not in on_tape:
            raise GraphError(f"{leaf!r} is not reachable from the loss")

    # prune to nodes that lead to some requested leaf
    wanted = {id(t) for t in leaves}
    useful: set[int] = set()
    for node in order:
        if id(node) in wanted or any(id(p) in useful for p in node._parents):
            useful.add(id(node))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        need = tuple(id(p) in useful for p in node._parents)
        parent_grads = node._backward(g, need)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or id(p) not in useful:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for leaf in leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
