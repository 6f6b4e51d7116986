"""Dense float64 tensors with a recorded reverse-mode tape.

Every op returns a new immutable :class:`Tensor`. When a :class:`GradientTape`
is active and at least one input requires a gradient, the op appends itself to
the tape together with a vector-Jacobian product closure; :func:`backward`
walks the tape in reverse creation order.

    >>> store = {"w": np.zeros(3)}
    >>> with GradientTape() as tape:
    ...     p = tape.watch(store)
    ...     loss = reduce_sum(p["w"])
    >>> backward(loss, tape)["w"]
    array([1., 1., 1.])
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DEBUG = False
_TAPES: list["GradientTape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable."""


class NonFiniteError(FloatingPointError):
    """Raised when a tensor holds NaN or Inf."""


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf when ``flag`` is true."""
    global _DEBUG
    _DEBUG = bool(flag)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if _check:
            _check_finite(arr, "Tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __getitem__ = lambda self, key: getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    if _DEBUG:
        _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=np.float64)
    out.flags.writeable = False
    t.data = out
    t.name = None
    t._parents = ()
    t._vjp = None
    t.requires_grad = False
    if _TAPES and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
        _TAPES[-1]._nodes.append(t)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


elementwise_mul = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp values; the gradient is zero wherever clamping was active."""
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return _make(out, (a,), lambda g: (g * inside,), "clip")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data, _check=False)


# linear algebra / reductions --------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of 1-D or 2-D operands (vectors are promoted as in numpy)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        A = a.data if a.ndim == 2 else a.data[None, :]
        B = b.data if b.ndim == 2 else b.data[:, None]
        G = g.reshape(A.shape[0], B.shape[1])
        return (
            (G @ B.T).reshape(a.shape),
            (A.T @ G).reshape(b.shape),
        )

    return _make(out, (a, b), vjp, "matmul")


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp, "reduce_sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis (shape {a.shape})")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over the entries where ``mask`` is true.

    Masked-out entries are exactly zero; rows with no admissible entry are all
    zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape or a.ndim != 2:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs input {a.shape}")
    filled = np.where(mask, a.data, -np.inf)
    m = filled.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, a.data, 0.0) - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (a,), vjp, "masked_softmax")


# structural -----------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, vjp, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {a.shape[axis]}")
    out, start = [], 0
    ax = axis % a.ndim
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(out, (a,), vjp, "getitem")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def gather(table: Tensor, index) -> Tensor:
    """Rows ``table[index]`` for an integer index array."""
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather index out of range for table with {n} rows")

    def vjp(g):
        full = np.zeros(table.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(table.data[index], (table,), vjp, "gather")


def segment_sum(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets (empty buckets are zero)."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape != values.shape[:1]:
        raise ShapeError(f"segment ids {segment_ids.shape} vs values {values.shape}")
    out = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(out, segment_ids, values.data)
    return _make(out, (values,), lambda g: (g[segment_ids],), "segment_sum")


# tape -----------------------------------------------------------------------

class GradientTape:
    """Records ops executed inside its ``with`` block.

    Parameters enter the tape through :meth:`watch`; after :func:`backward`
    the ``grads`` dict maps every watched name to a gradient of the
    parameter's shape (zeros if the parameter did not take part).
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self.watched: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, store, names: Iterable[str] | None = None) -> dict[str, Tensor]:
        names = sorted(store) if names is None else list(names)
        leaves = {}
        for name in names:
            leaf = Tensor(store[name], requires_grad=True, name=name, _check=False)
            self.watched[name] = leaf
            leaves[name] = leaf
        return leaves


def backward(loss: Tensor, tape: GradientTape) -> dict[str, np.ndarray]:
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    tape.grads = {
        name: grads.get(id(leaf), np.zeros(leaf.shape)).reshape(leaf.shape)
        for name, leaf in tape.watched.items()
    }
    return tape.grads


# init -----------------------------------------------------------------------

def seeded_init(shape, seed, scheme: str = "uniform", scale: float | None = None) -> Tensor:
    """Reproducible random tensor.

    ``uniform`` draws from U(-a, a) with ``a = scale`` or ``1/sqrt(shape[-1])``;
    ``normal`` draws from N(0, scale**2) with the same default scale.
    ``seed`` may be an int or a sequence of ints (hashed by numpy's SeedSequence).
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    rng = np.random.default_rng(seed)
    a = scale if scale is not None else 1.0 / math.sqrt(max(shape[-1], 1))
    if scheme == "uniform":
        arr = rng.uniform(-a, a, size=shape)
    elif scheme == "normal":
        arr = rng.normal(0.0, a, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(arr)
