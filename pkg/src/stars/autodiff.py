"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Each differentiable operation builds its output with a closure that maps
the upstream gradient onto the gradients of its parents.  ``backward``
walks the recorded graph once in reverse topological order.

Broadcasting is limited to scalar-vs-tensor.  Explicit ``expand_rows`` /
``expand_cols`` / ``stack`` ops cover the few places where a vector has to
be tiled against a matrix.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop gradients from reaching ``params``."""
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, r in zip(params, prev):
            p.requires_grad = r


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.op = "leaf"

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ---- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scalar_mul(self, 1.0 / float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, target: Tensor) -> np.ndarray:
    if _is_scalar(target) and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# ---- binary elementwise -----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


# ---- unary elementwise ------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * x * g,), "square")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    x = a.data
    if p != int(p) and np.any(x < 0.0):
        raise DomainError(f"fractional power {p} of negative input")
    if p < 0 and np.any(x == 0.0):
        raise DomainError(f"negative power {p} of zero")
    y = x**p
    return _make(y, (a,), lambda g: (g * p * x ** (p - 1.0),), "power")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative input")
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * 0.5 / y,), "sqrt")


# ---- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for x [B×in], w [out×in], b [out] as one node."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)

    def bw(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, bw, "linear")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(y, (a,), lambda g: (g.reshape(old),), "reshape")


def expand_rows(v: Tensor, n: int) -> Tensor:
    """Tile a vector [C] into [n×C]."""
    if v.data.ndim != 1:
        raise ShapeError(f"expand_rows needs a vector, got shape {v.shape}")
    y = np.broadcast_to(v.data, (n, v.shape[0])).copy()
    return _make(y, (v,), lambda g: (g.sum(axis=0),), "expand_rows")


def expand_cols(v: Tensor, n: int) -> Tensor:
    """Tile a vector [B] into [B×n]."""
    if v.data.ndim != 1:
        raise ShapeError(f"expand_cols needs a vector, got shape {v.shape}")
    y = np.broadcast_to(v.data[:, None], (v.shape[0], n)).copy()
    return _make(y, (v,), lambda g: (g.sum(axis=1),), "expand_cols")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally-shaped tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack of an empty list")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack: shape {t.shape} != {shape}")
    y = np.stack([t.data for t in tensors])
    return _make(y, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


# ---- reductions ---------------------------------------------------------------
def _norm_axis(a: Tensor, axis):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    nd = a.data.ndim
    out = []
    for ax in axes:
        if not -nd <= ax < nd:
            raise ShapeError(f"axis {ax} out of range for shape {a.shape}")
        out.append(ax % nd)
    return tuple(sorted(out))


def _count(a: Tensor, axes) -> int:
    if axes is None:
        return a.data.size
    return int(np.prod([a.shape[ax] for ax in axes]))


def _expand_back(g: np.ndarray, a: Tensor, axes) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g, a.shape)
    return np.broadcast_to(np.expand_dims(g, axes), a.shape)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axis(a, axis)
    if _count(a, axes) == 0:
        raise DomainError("empty reduction")
    y = a.data.sum(axis=axes)
    return _make(np.asarray(y), (a,), lambda g: (_expand_back(g, a, axes).copy(),), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(a, axis)
    n = _count(a, axes)
    if n == 0:
        raise DomainError("empty reduction")
    y = a.data.mean(axis=axes)
    return _make(np.asarray(y), (a,), lambda g: (_expand_back(g, a, axes) / n,), "mean")


def variance_biased(a: Tensor, axis=None) -> Tensor:
    """Variance with divisor n (batch-norm convention)."""
    axes = _norm_axis(a, axis)
    n = _count(a, axes)
    if n == 0:
        raise DomainError("empty reduction")
    mu = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - mu
    y = (centered * centered).mean(axis=axes)

    def bw(g):
        return (_expand_back(g, a, axes) * (2.0 / n) * centered,)

    return _make(np.asarray(y), (a,), bw, "variance_biased")


# ---- softmax family ---------------------------------------------------------------
def _check_rows(x: Tensor, temperature: float, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} needs a [B×C] matrix, got shape {x.shape}")
    if not temperature > 0:
        raise DomainError(f"{op}: temperature must be positive, got {temperature}")


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    _check_rows(x, temperature, "softmax_rows")
    z = x.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner) / temperature,)

    return _make(p, (x,), bw, "softmax_rows")


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    _check_rows(x, temperature, "log_softmax_rows")
    z = x.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / temperature,)

    return _make(y, (x,), bw, "log_softmax_rows")


# ---- custom op hook -------------------------------------------------------------------
def custom(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Record a user-defined op; ``backward_fn(g)`` returns one grad per parent."""
    return _make(np.asarray(data, dtype=np.float64), parents, backward_fn, op)


# ---- backward -----------------------------------------------------------------------------
def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across separate graphs; calling backward twice
    on the same graph raises ``ContractError``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss._consumed:
        raise ContractError("backward called twice on the same graph")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    loss._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``x.data`` (in place)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return g


def clone_param(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=requires_grad)
