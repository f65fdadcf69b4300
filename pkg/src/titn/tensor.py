"""Dense tensors with eager, tape-based reverse-mode differentiation.

Every op computes its forward value with numpy immediately and records a
closure that maps the output adjoint to input adjoints. ``Tensor.backward``
collects the recorded ops reachable from a scalar loss into a :class:`Tape`
(topologically ordered) and replays it in reverse.

Broadcasting is deliberately narrow. Elementwise binary ops accept operands
of equal shape, a scalar operand, or an operand whose shape is a suffix of
the other's (leading-batch broadcast). ``matmul`` additionally broadcasts
leading batch extents equal to 1.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

ArrayLike = Union[np.ndarray, float, int, Sequence]

DEBUG = os.environ.get("TITN_DEBUG", "") not in ("", "0")

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable op recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of every matmul executed."""

    def __init__(self) -> None:
        self.macs = 0
        self.calls = 0

    def add(self, macs: int) -> None:
        self.macs += int(macs)
        self.calls += 1


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    prev = getattr(_state, "mac_counter", None)
    _state.mac_counter = counter
    try:
        yield counter
    finally:
        _state.mac_counter = prev


class ShapeError(ValueError):
    pass


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if isinstance(data, (np.ndarray, np.generic)):
        arr = np.asarray(data) if dtype is None else np.asarray(data).astype(dtype, copy=False)
    else:
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An n-d float array that can take part in differentiation.

    ``data`` is a numpy array (row-major); ``grad`` is ``None`` until a
    backward pass reaches this tensor as a leaf with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    # lets ndarray + Tensor fall through to Tensor.__radd__ and friends
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        dtype=None,
        name: str = "",
        _parents: tuple = (),
        _backward: Optional[Callable] = None,
        op: str = "",
    ):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    # -- basic introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- differentiation -----------------------------------------------------
    def backward(self) -> "Tape":
        """Accumulate d(self)/d(leaf) into ``grad`` of every requiring leaf.

        Returns the tape that was replayed, so callers may replay it again.
        """
        tape = Tape.record(self)
        tape.backward()
        return tape

    # -- operator sugar ------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Tape:
    """Topologically ordered record of the ops that produced a tensor.

    ``nodes`` lists every tensor reachable from the output, each after all
    tensors it was computed from. Leaves appear too; they carry no backward
    closure.
    """

    def __init__(self, output: Tensor, nodes: list):
        self.output = output
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        # iterative DFS; recursion depth would overflow on deep graphs
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(output, order)

    @property
    def ops(self) -> list:
        return [n for n in self.nodes if n._backward is not None]

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        out = self.output
        if seed is None:
            if out.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {out.shape}")
            seed = np.ones_like(out.data)
        adjoints = {id(out): seed}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"non-finite output from {op} on finite inputs")
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


# -- broadcasting helpers ------------------------------------------------------

def _elementwise_shape(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if int(np.prod(a)) == 1 and len(a) <= len(b) or int(np.prod(b)) == 1 and len(b) <= len(a):
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _operands(a, b) -> tuple:
    a = as_tensor(a)
    b = as_tensor(b)
    # python scalars follow the tensor operand's precision
    if not a.requires_grad and a.size == 1 and a.data.dtype != b.data.dtype and a.ndim == 0:
        a = Tensor(a.data.astype(b.data.dtype))
    if not b.requires_grad and b.size == 1 and b.data.dtype != a.data.dtype and b.ndim == 0:
        b = Tensor(b.data.astype(a.data.dtype))
    return a, b


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _elementwise_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _elementwise_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _elementwise_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _elementwise_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def backward(g):
        return (g * exponent * x ** (exponent - 1),)

    return _make(x ** exponent, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input was in range."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), backward, "gelu")


# -- reductions ------------------------------------------------------------------

def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axes, keepdims) * (1.0 / count)


# -- shape manipulation ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    """Expand leading extents (prepended or of size 1) to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)
    if lead < 0 or any(s not in (1, t) for s, t in zip(src, shape[lead:])):
        raise ShapeError(f"broadcast_to: cannot expand {src} to {shape}")
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), backward, "concat")


def getitem(a, index) -> Tensor:
    """Basic or integer-array indexing; the adjoint scatters with add."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def pick(a, labels: np.ndarray) -> Tensor:
    """Select ``a[i, labels[i]]`` for each row of a 2-d tensor."""
    a = as_tensor(a)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(a.shape[0])
    return getitem(a, (rows, labels))


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading batch extents must agree or be 1; a rank-2 right operand is
    shared across all leading batch extents of the left one.
    """
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ba, bb = a.shape[:-2], b.shape[:-2]
    n = max(len(ba), len(bb))
    pa = (1,) * (n - len(ba)) + ba
    pb = (1,) * (n - len(bb)) + bb
    if any(x != y and x != 1 and y != 1 for x, y in zip(pa, pb)):
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data
    out = ad @ bd
    counter = getattr(_state, "mac_counter", None)
    if counter is not None:
        batch = int(np.prod([max(x, y) for x, y in zip(pa, pb)]))
        counter.add(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def backward(g):
        if b.ndim == 2:
            k = ad.shape[-1]
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# -- normalizing ops -------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)[0]
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)[0]
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def normalize(a, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis, population variance."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gx),)

    return _make(out, (a,), backward, "normalize")


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))
