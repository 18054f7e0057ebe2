"""Reverse-mode differentiation over numpy arrays.

Every primitive below records itself on the active :class:`Tape` when at
least one operand requires a gradient.  Adjoint rules are written with the
same primitives, so running :func:`backward` with ``create_graph=True``
records the gradient computation as well and it can be differentiated again
(needed when a loss contains forces).

The functional helpers (:func:`exp`, :func:`cos`, :func:`silu`, ...) accept
plain numpy arrays too and then simply evaluate with numpy.  That lets the
algebra and geometry code run unchanged on constants and on taped values.
"""

from __future__ import annotations

import contextlib
import threading
import traceback
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tape",
    "Tensor",
    "taping",
    "no_record",
    "backward",
    "grad",
    "audit",
    "as_tensor",
    "value_of",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "sigmoid",
    "silu",
    "matmul",
    "swapaxes",
    "concat",
    "take",
    "index_add",
    "broadcast_to",
    "sum_to",
]


class _Node:
    __slots__ = ("index", "op", "out", "parents", "vjp")

    def __init__(self, index, op, out, parents, vjp):
        self.index = index
        self.op = op
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Primitive applications in the order they were evaluated.

    Append order is a topological order, so the backward sweep is a plain
    reverse iteration.  ``untaped`` collects implicit conversions of taped
    values to numpy (see :func:`audit`).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.untaped: list[str] = []

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


_state = threading.local()


def _active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def taping(tape: Tape | None = None):
    """Make ``tape`` (or a fresh one) the active tape for this thread."""
    tape = Tape() if tape is None else tape
    prev = _active_tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def _recording(flag: bool):
    prev = _is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


def no_record():
    """Evaluate primitives without recording them."""
    return _recording(False)


class Tensor:
    """A numpy array that participates in reverse-mode differentiation."""

    __slots__ = ("value", "requires_grad", "node", "__weakref__")
    # makes numpy defer binary operators to us and refuse ufuncs on Tensors
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False):
        value = np.asarray(value)
        if requires_grad and not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        self.value = value
        self.requires_grad = requires_grad
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag})"

    def __len__(self):
        return len(self.value)

    def __array__(self, dtype=None, copy=None):
        tape = _active_tape()
        if tape is not None:
            where = traceback.extract_stack(limit=3)[0]
            tape.untaped.append(f"{where.filename}:{where.lineno} {where.line}")
        return self.value if dtype is None else self.value.astype(dtype)

    def __float__(self):
        return float(self.__array__())

    def item(self) -> float:
        return self.value.item()

    def numpy(self) -> np.ndarray:
        return self.value

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    # array-like methods, mirroring numpy names
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a1, a2):
        return swapaxes(self, a1, a2)


def value_of(x):
    """The raw numpy value of a Tensor or array-like, without auditing."""
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and np.issubdtype(like.dtype, np.floating) and arr.dtype != like.dtype:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _make(op: str, value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and _is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(len(tape.nodes), op, out, tuple(parents), vjp)
        tape.nodes.append(node)
        out.node = node
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _needs(t: Tensor) -> bool:
    return t.requires_grad


# -- shape plumbing ---------------------------------------------------------


def _reduce(v: np.ndarray, axes: tuple[int, ...], keepdims: bool = False) -> np.ndarray:
    """Sum over ``axes``; trailing-axis reductions go through a matrix product.

    numpy's reduction over short trailing axes is several times slower than
    a product with a ones vector, and these reductions dominate training.
    """
    axes = tuple(sorted(a % v.ndim for a in axes)) if v.ndim else ()
    k = len(axes)
    if k and k < v.ndim and axes == tuple(range(v.ndim - k, v.ndim)) and v.dtype.kind == "f" and v.size:
        lead = v.shape[:v.ndim - k]
        width = int(np.prod(v.shape[v.ndim - k:]))
        out = np.ascontiguousarray(v).reshape(-1, width) @ np.ones(width, dtype=v.dtype)
        return out.reshape(lead + (1,) * k if keepdims else lead)
    return v.sum(axis=axes, keepdims=keepdims)


def _sum_to_value(v: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if v.shape == tuple(shape):
        return v
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        k + lead for k, s in enumerate(shape) if s == 1 and v.shape[k + lead] != 1
    )
    if lead == 0 and len(axes) < v.ndim:
        return _reduce(v, axes, keepdims=True).reshape(shape)
    return v.sum(axis=axes, keepdims=True).reshape(shape)


def sum_to(x, shape) -> Tensor:
    """Reduce ``x`` by summation to ``shape`` (inverse of broadcasting)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make("sum_to", _sum_to_value(x.value, shape), (x,),
                 lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make("broadcast_to", np.broadcast_to(x.value, shape).copy(), (x,),
                 lambda g: (sum_to(g, x.shape),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make("reshape", x.value.reshape(shape), (x,),
                 lambda g: (reshape(g, x.shape),))


def swapaxes(x, a1=-1, a2=-2):
    if not isinstance(x, Tensor):
        return np.swapaxes(x, a1, a2)
    return _make("swapaxes", np.swapaxes(x.value, a1, a2), (x,),
                 lambda g: (swapaxes(g, a1, a2),))


def getitem(x: Tensor, key) -> Tensor:
    return _make("getitem", x.value[key], (x,),
                 lambda g: (_scatter_slice(g, key, x.shape),))


def _scatter_slice(g: Tensor, key, shape) -> Tensor:
    out = np.zeros(shape, dtype=g.dtype)
    out[key] = g.value
    return _make("scatter_slice", out, (g,), lambda h: (getitem(h, key),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    ax = axis % value.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g):
        out = []
        for k, p in enumerate(parts):
            if not p.requires_grad:
                out.append(None)
                continue
            key = (slice(None),) * ax + (slice(bounds[k], bounds[k + 1]),)
            out.append(getitem(g, key))
        return out

    return _make("concat", value, parts, vjp)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make("add", a.value + b.value, (a, b), lambda g: (
        sum_to(g, a.shape) if _needs(a) else None,
        sum_to(g, b.shape) if _needs(b) else None,
    ))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make("sub", a.value - b.value, (a, b), lambda g: (
        sum_to(g, a.shape) if _needs(a) else None,
        sum_to(-g, b.shape) if _needs(b) else None,
    ))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make("mul", a.value * b.value, (a, b), lambda g: (
        sum_to(g * b, a.shape) if _needs(a) else None,
        sum_to(g * a, b.shape) if _needs(b) else None,
    ))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        ga = sum_to(g / b, a.shape) if _needs(a) else None
        gb = sum_to(-(g * a) / (b * b), b.shape) if _needs(b) else None
        return ga, gb

    return _make("div", a.value / b.value, (a, b), vjp)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power only supports constant exponents")
    p = float(exponent)
    if p == 2.0:
        return _make("square", a.value * a.value, (a,), lambda g: (g * a * 2.0,))
    return _make("power", a.value ** p, (a,), lambda g: (g * p * a ** (p - 1.0),))


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    out = None

    def vjp(g):
        return (g * out,)

    out = _make("exp", np.exp(x.value), (x,), vjp)
    return out


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    return _make("log", np.log(x.value), (x,), lambda g: (g / x,))


def sin(x):
    if not isinstance(x, Tensor):
        return np.sin(x)
    return _make("sin", np.sin(x.value), (x,), lambda g: (g * cos(x),))


def cos(x):
    if not isinstance(x, Tensor):
        return np.cos(x)
    return _make("cos", np.cos(x.value), (x,), lambda g: (-(g * sin(x)),))


def sqrt(x):
    if not isinstance(x, Tensor):
        return np.sqrt(x)
    out = None

    def vjp(g):
        return (g / (out * 2.0),)

    out = _make("sqrt", np.sqrt(x.value), (x,), vjp)
    return out


def _sigmoid_value(v):
    # tanh form does not overflow for large |v|
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x):
    if not isinstance(x, Tensor):
        return _sigmoid_value(np.asarray(x))
    out = None

    def vjp(g):
        return (g * out * (1.0 - out),)

    out = _make("sigmoid", _sigmoid_value(x.value), (x,), vjp)
    return out


def silu(x):
    """x * sigmoid(x), with derivative sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    if not isinstance(x, Tensor):
        x = np.asarray(x)
        return x * _sigmoid_value(x)

    def vjp(g):
        s = sigmoid(x)
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _make("silu", x.value * _sigmoid_value(x.value), (x,), vjp)


# -- reductions and linear algebra ------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    kept = tuple(1 if k in axes else s for k, s in enumerate(x.shape))

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, x.shape),)

    return _make("sum", _reduce(x.value, axes, keepdims), (x,), vjp)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / count)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting; both operands >= 2-D."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make("matmul", a.value @ b.value, (a, b), lambda g: (
        _matmul_grad_a(g, a, b) if _needs(a) else None,
        _matmul_grad_b(g, a, b) if _needs(b) else None,
    ))


# A shared 2-D operand (weights, constant maps) receives a gradient summed
# over the batch; folding the batch into the contraction axis is much
# cheaper than a batched product followed by a reduction.

def _matmul_grad_a(g, a, b):
    if a.ndim == 2 and b.ndim > 2 and b.shape[:-2] == g.shape[:-2]:
        return matmul(reshape(swapaxes(g), (-1, a.shape[0])).swapaxes(-1, -2),
                      reshape(swapaxes(b), (-1, a.shape[1])))
    return sum_to(matmul(g, swapaxes(b)), a.shape)


def _matmul_grad_b(g, a, b):
    if b.ndim == 2 and a.ndim > 2 and a.shape[:-2] == g.shape[:-2]:
        return matmul(reshape(a, (-1, b.shape[0])).swapaxes(-1, -2),
                      reshape(g, (-1, b.shape[1])))
    return sum_to(matmul(swapaxes(a), g), b.shape)


def _scatter_matrix(index: np.ndarray, n: int, dtype) -> sparse.csr_matrix:
    m = len(index)
    return sparse.csr_matrix(
        (np.ones(m, dtype=dtype), (index, np.arange(m))), shape=(n, m)
    )


def take(x, index: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by an integer index (gather along axis 0)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return _make("take", x.value[index], (x,), lambda g: (index_add(g, index, n),))


def index_add(x, index: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` buckets given by ``index`` (scatter-add).

    Summation within a bucket runs in row order, so results are
    deterministic and a bucket only ever sees its own rows.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != x.shape[0]:
        raise ValueError(f"index of length {len(index)} for {x.shape[0]} rows")
    flat = x.value.reshape(x.shape[0], int(np.prod(x.shape[1:], dtype=np.int64)))
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    value = (_scatter_matrix(index, n, dtype) @ flat).reshape((n,) + x.shape[1:])
    return _make("index_add", value, (x,), lambda g: (take(g, index),))


# -- driving the tape --------------------------------------------------------


def backward(
    tape: Tape,
    seed: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of the scalar ``seed`` with respect to each tensor in ``wrt``.

    Nodes are visited once each, in reverse tape order.  With
    ``create_graph`` the adjoint computation is itself recorded on ``tape``
    so the returned gradients can be differentiated again.
    """
    node = seed.node
    if node is None or node.index >= len(tape.nodes) or tape.nodes[node.index] is not node:
        raise ValueError("seed is not recorded on this tape")
    if seed.size != 1:
        raise ValueError(f"seed must be a scalar, got shape {seed.shape}")
    keep = {id(w) for w in wrt}
    grads: dict[int, Tensor] = {id(seed): Tensor(np.ones_like(seed.value))}
    with _recording(create_graph):
        for nd in reversed(tape.nodes[: node.index + 1]):
            key = id(nd.out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for parent, pg in zip(nd.parents, nd.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pkey = id(parent)
                prev = grads.get(pkey)
                grads[pkey] = pg if prev is None else prev + pg
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(Tensor(np.zeros_like(w.value)) if g is None else g)
    return out


def grad(fn: Callable[..., Tensor], *args: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``fn`` on arrays and return (value, gradients)."""
    with taping() as tape:
        leaves = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in args]
        out = fn(*leaves)
        if not isinstance(out, Tensor) or out.node is None:
            return float(value_of(out)), [np.zeros_like(l.value) for l in leaves]
        gs = backward(tape, out, leaves)
    return float(out.value), [g.value for g in gs]


def audit(fn: Callable, *args, **kwargs) -> list[str]:
    """Run ``fn`` under a fresh tape and list implicit numpy conversions.

    A model whose forward pass is built only from taped primitives yields an
    empty list.
    """
    with taping() as tape:
        fn(*args, **kwargs)
    return list(tape.untaped)


def leaves(arrays: Iterable[np.ndarray]) -> list[Tensor]:
    return [Tensor(a, requires_grad=True) for a in arrays]
