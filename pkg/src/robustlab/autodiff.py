"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every primitive records its parents and a vector-Jacobian product written in
terms of other primitives, so gradients are themselves differentiable. That is
what double backpropagation (input-gradient penalties) needs.

Example:
    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> (gx,) = grad((x * x).sum(), [x])
    >>> gx.data
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "trace",
    "jacobian",
    "gather_cols",
    "scatter_cols",
    "log_softmax",
    "softmax",
    "logsumexp",
    "concat_cols",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops graph recording (per thread)."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out._op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other, like=self), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def sqrt(self) -> "Tensor":
        return power(self, 0.5)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g if g.shape == shape else reshape(g, shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- primitives ---------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b, sa), _unbroadcast(g * a, sb)),
        "mul",
    )


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "div")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data / b.data,
        (a, b),
        lambda g: (_unbroadcast(g / b, sa), _unbroadcast(neg(g * a / (b * b)), sb)),
        "div",
    )


def power(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if c == 1.0:
        return a
    return Tensor._make(a.data**c, (a,), lambda g: (g * (c * power(a, c - 1.0)),), "pow")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    out = Tensor._make(out_data, (a,), vjp, "exp")
    return out


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a,), "log")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    out = Tensor._make(out_data, (a,), vjp, "tanh")
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.dtype)
    return Tensor._make(a.data * mask, (a,), lambda g: (g * Tensor(mask),), "relu")


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * Tensor(s),), "abs")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    if axis is not None:
        axis = tuple(ax % a.ndim for ax in axis)

    def vjp(g):
        if not keepdims and axis is not None:
            kept = tuple(1 if i in axis else n for i, n in enumerate(shape))
            g = reshape(g, kept)
        elif not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return Tensor._make(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),), "broadcast"
    )


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return Tensor._make(data, (a,), lambda g: (reshape(g, src),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return Tensor._make(a.data.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected two matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape} "
            f"({a.shape[1]} != {b.shape[0]})"
        )
    return Tensor._make(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
        "matmul",
    )


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape

    def vjp(g):
        return (_scatter_index(g, idx, src),)

    return Tensor._make(a.data[idx], (a,), vjp, "getitem")


def _scatter_index(g: Tensor, idx, shape) -> Tensor:
    def fwd(gd):
        out = np.zeros(shape, dtype=gd.dtype)
        np.add.at(out, idx, gd)
        return out

    return Tensor._make(fwd(g.data), (g,), lambda h: (getitem(h, idx),), "scatter_index")


def gather_cols(a: Tensor, idx: np.ndarray) -> Tensor:
    """``out[:, j] = a[:, idx[j]]`` for a 2-D ``a``; ``idx`` may repeat columns."""
    idx = np.asarray(idx, dtype=np.intp)
    ncols = a.shape[1]
    return Tensor._make(
        a.data[:, idx], (a,), lambda g: (scatter_cols(g, idx, ncols),), "gather_cols"
    )


def scatter_cols(g: Tensor, idx: np.ndarray, ncols: int) -> Tensor:
    """Adjoint of :func:`gather_cols`: accumulate columns of ``g`` into ``ncols`` slots."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((g.shape[0], ncols), dtype=g.dtype)
    np.add.at(out, (slice(None), idx), g.data)
    return Tensor._make(out, (g,), lambda h: (gather_cols(h, idx),), "scatter_cols")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return Tensor._make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp, "concat")


# -- composites ---------------------------------------------------------------------


def logsumexp(z: Tensor, axis: int = -1) -> Tensor:
    # the shift is treated as a constant; the function does not depend on it
    m = Tensor(np.max(z.data, axis=axis, keepdims=True))
    return log(exp(z - m).sum(axis=axis, keepdims=True)) + m


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    return z - logsumexp(z, axis=axis)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(z, axis=axis))


# -- differentiation ---------------------------------------------------------------


def trace(output: Tensor) -> list[Tensor]:
    """Topologically ordered nodes (inputs first) that ``output`` depends on."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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


def grad(
    output: Tensor,
    wrt: Iterable[Tensor],
    grad_output: Tensor | np.ndarray | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Reverse-mode gradient of ``output`` with respect to each tensor in ``wrt``.

    ``output`` must be a scalar unless ``grad_output`` (the cotangent) is given.
    With ``create_graph`` the returned gradients carry their own graph and can be
    differentiated again. Inputs that ``output`` does not depend on get zeros.
    """
    wrt = list(wrt)
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = as_tensor(grad_output, like=output)
        if seed.shape != output.shape:
            raise ShapeError(f"grad: cotangent shape {seed.shape} != output shape {output.shape}")
    if not output.requires_grad:
        return [Tensor(np.zeros_like(w.data)) for w in wrt]

    order = trace(output)
    cot: dict[int, Tensor] = {id(output): seed}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = cot.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None:
                    cot[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                cot[key] = pg if key not in cot else cot[key] + pg
    return [cot.get(id(w), Tensor(np.zeros_like(w.data))) for w in wrt]


def jacobian(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Exact Jacobian of a vector-valued ``fn`` at a single point ``x``.

    One forward pass is recorded and row ``k`` is obtained by its own backward
    pass seeded with the ``k``-th basis vector.
    """
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = fn(xt)
    flat = out.reshape(-1)
    rows = []
    for k in range(flat.size):
        seed = np.zeros(flat.size)
        seed[k] = 1.0
        (gx,) = grad(flat, [xt], grad_output=seed)
        rows.append(gx.data.reshape(-1))
    return np.stack(rows) if rows else np.zeros((0, xt.size))
