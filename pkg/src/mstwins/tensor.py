"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every differentiable op appends one node to the current thread's
:class:`Tape`.  ``backward`` walks that tape in strictly decreasing append
order, so no explicit topological sort is needed: a node's inputs were
always recorded before it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: BackwardFn):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of differentiable ops for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def record(self, op: str, parents: tuple, backward: BackwardFn) -> int:
        if self.consumed:
            raise RuntimeError("cannot record on a tape that has already been backpropagated")
        self.nodes.append(_Node(op, parents, backward))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def _local():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
    return _state


def get_tape() -> Tape:
    return _local().tape


def new_tape() -> Tape:
    """Discard the current tape (and everything it holds) and start a fresh one."""
    st = _local()
    st.tape = Tape()
    return st.tape


def is_grad_enabled() -> bool:
    return _local().grad_enabled


@contextlib.contextmanager
def no_grad():
    st = _local()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[int] = None
        self._tape: Optional[Tape] = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd -----------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # -- operator sugar (implementations below) -----------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(out: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, guard it against NaN/Inf and record it on the tape."""
    if not np.isfinite(out).all():
        raise NonFiniteError(op)
    t = Tensor.__new__(Tensor)
    t.data = out if out.flags.c_contiguous else np.ascontiguousarray(out)
    t.grad = None
    t.name = None
    t._node = None
    t._tape = None
    st = _local()
    needs = st.grad_enabled and any(p.requires_grad for p in parents)
    t.requires_grad = needs
    if needs:
        t._tape = st.tape
        t._node = st.tape.record(op, tuple(parents), backward_fn)
    return t


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached from the tape (no input requires grad)")
    tape = loss._tape
    if loss._node is None:
        # the loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if tape.consumed:
        raise RuntimeError("backward() called twice on the same tape; re-run the forward pass")
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    nodes = tape.nodes
    for idx in range(loss._node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        in_grads = node.backward(g)
        for parent, pg in zip(node.parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                prev = grads.get(parent._node)
                grads[parent._node] = pg if prev is None else prev + pg
    tape.consumed = True
    tape.nodes = []
    if get_tape() is tape:
        new_tape()


# ---------------------------------------------------------------------------
# elementwise arithmetic with broadcasting
# ---------------------------------------------------------------------------

def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent) -> Tensor:
    """``a ** exponent`` for a constant (scalar or array) exponent.

    Zero exponents give exactly zero gradient, even where ``a == 0``.
    """
    e = np.asarray(exponent.data if isinstance(exponent, Tensor) else exponent, dtype=DTYPE)
    ad = a.data
    out = np.power(ad, e)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(e == 0, 0.0, e * np.power(ad, e - 1))
        return (unbroadcast(g * d, ad.shape),)

    return make(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    keep = ad >= floor
    return make(np.maximum(ad, floor), (a,), lambda g: (g * keep,), "clamp_min")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return make(np.asarray(out), (a,), lambda g: (np.broadcast_to(g.reshape(kept), shape),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return make(np.asarray(out), (a,), lambda g: (np.broadcast_to(g.reshape(kept) / count, shape),), "mean")


def _extremum(a: Tensor, axis: int, keepdims: bool, pick, op: str) -> Tensor:
    axis = axis % a.ndim
    idx = np.expand_dims(pick(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx, gk, axis=axis)
        return (full,)

    return make(out if keepdims else out.squeeze(axis), (a,), bw, op)


def tmin(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Minimum along one axis; the gradient goes to the first minimiser."""
    return _extremum(a, axis, keepdims, np.argmin, "min")


def tmax(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return _extremum(a, axis, keepdims, np.argmax, "max")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dims of {a.shape} and {b.shape} not broadcastable") from None
    ad, bd = a.data, b.data
    # shared weight matrix: fold all batch dims into a single GEMM
    folded = bd.ndim == 2 and ad.ndim > 2
    if folded:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = np.matmul(ad, bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if folded:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if folded:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    if out.size != a.size:
        raise ValueError(f"cannot reshape {src} into {shape}")
    return make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    """Axis permutation; always materialises a contiguous copy."""
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(out, tuple(tensors), bw, "concat")


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the backward pass scatters with ``np.add.at``."""
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make(np.array(out, copy=True), (a,), bw, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def pad(a: Tensor, widths: Sequence[tuple]) -> Tensor:
    """Zero-pad; ``widths`` is one ``(before, after)`` pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    if all(w == (0, 0) for w in widths):
        return a
    out = np.pad(a.data, widths)
    crop = tuple(slice(lo, n + lo) for (lo, _), n in zip(widths, a.shape))
    return make(out, (a,), lambda g: (g[crop],), "pad")


def gather_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Select the elements where ``mask`` is true, as a 1-D tensor."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ValueError(f"gather_mask: mask shape {mask.shape} != tensor shape {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[mask] = g
        return (full,)

    return make(a.data[mask], (a,), bw, "gather_mask")
