"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward operation returns a new :class:`Tensor`. When any input
requires a gradient, the output remembers its parents and a closure that maps
the output gradient to input gradients. :func:`backward` linearises that graph
into a :class:`Tape` (topological order) and walks it in reverse, visiting each
node once.

Broadcasting follows numpy rules for the elementwise ops; ``matmul`` follows
``np.matmul`` batch broadcasting. Nothing more general is supported.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericalError, ShapeError

NORM_EPS = 1e-12

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    Attributes:
        data: The values, always a float64 ``np.ndarray``.
        requires_grad: Whether gradients should be accumulated into ``grad``.
        grad: Accumulated gradient for leaf tensors, ``None`` until populated.
        kind: Name of the operation that produced this tensor (``"leaf"`` for
            user-created tensors).
    """

    __slots__ = ("data", "requires_grad", "grad", "kind", "name", "velocity",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.kind = "leaf"
        self.name = name
        self.velocity: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, kind={self.kind}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / float(other))
        raise TypeError("tensor division is only defined by a scalar")

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.kind = kind
    out.name = None
    out.grad = None
    out.velocity = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", ad @ bd, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise NumericalError(f"exp: overflow for input of shape {a.shape}")
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError(f"log: non-positive input (min {a.data.min()!r})")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError(f"sqrt: non-positive input (min {a.data.min()!r})")
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise ``max(a, lo)``; gradient is zero where the clamp is active."""
    keep = a.data >= lo
    return _make("clamp_min", np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if a.ndim < 1:
        raise ShapeError("softmax_rows: needs at least one axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax_rows", out, (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    m = a.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True))
    out = a.data - lse
    sm = np.exp(out)
    return _make("log_softmax_rows", out, (a,),
                 lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale every vector along the last axis to unit Euclidean norm.

    Raises:
        DomainError: if any row has norm below ``NORM_EPS``.
    """
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if (norm < NORM_EPS).any():
        raise DomainError("l2_normalize_rows: row with (near-)zero norm")
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize_rows", out, (a,), backward)


def _check_axis(kind: str, a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{kind}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum_axis(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum over one axis, or over everything when ``axis`` is None."""
    shape = a.shape
    if axis is None:
        return _make("sum_axis", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _check_axis("sum_axis", a, axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum_axis", a.data.sum(axis=ax, keepdims=keepdims), (a,), backward)


def mean_pool_axis(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over one axis (or all axes)."""
    shape = a.shape
    if axis is None:
        n = a.size
        return _make("mean_pool_axis", np.asarray(a.data.mean()), (a,),
                     lambda g: (np.broadcast_to(g / n, shape).copy(),))
    ax = _check_axis("mean_pool_axis", a, axis)
    n = shape[ax]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean_pool_axis", a.data.mean(axis=ax, keepdims=keepdims), (a,), backward)


def concat_axis(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_axis: no inputs")
    ax = _check_axis("concat_axis", tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat_axis: shapes {[t.shape for t in tensors]} along axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat_axis", np.concatenate([t.data for t in tensors], axis=ax),
                 tuple(tensors), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2 axes, got shape {a.shape}")
    return _make("transpose", np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select entries along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim < 1:
        raise ShapeError("gather_rows: needs at least one axis")
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make("gather_rows", a.data[idx], (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "l2_normalize_rows": l2_normalize_rows,
    "mean_pool_axis": mean_pool_axis,
    "concat_axis": concat_axis,
    "transpose": transpose,
    "gather_rows": gather_rows,
    "sum_axis": sum_axis,
    "square": square,
    "tanh": tanh,
    "sqrt": sqrt,
    "clamp_min": clamp_min,
    "reshape": reshape,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("relu", [x])``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    if kind == "concat_axis":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


class Tape:
    """Topologically ordered record of the operations leading to a tensor."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf requiring it."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float) -> None:
    """Heavy-ball SGD: ``v = momentum * v + grad``, ``p = p - lr * v``; clears grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {p.name or p.shape} has no grad")
    for p in params:
        v = p.grad if p.velocity is None else momentum * p.velocity + p.grad
        p.velocity = v
        p.data = p.data - lr * v
        p.grad = None
