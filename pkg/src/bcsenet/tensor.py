"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a row-major numpy array plus an optional gradient. While a
`Tape` is active, every primitive that touches a grad-requiring tensor appends
a node (operands, saved values, vector-Jacobian product) to the tape in
execution order, which is already a topological order. `backward` on a scalar
walks the tape once in reverse and accumulates gradients into every
requires_grad tensor along the way; disjoint uses of the same tensor sum.

Element type is chosen when values are created (float32 for training,
float64 for gradient checking) and is preserved by all primitives. Tensors
are treated as immutable once they participate in a tape: parameter updates
rebind `.data` to a fresh array instead of writing in place.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import InvalidArgument, ShapeError

DEFAULT_DTYPE = np.float32

_active_tape: Optional["Tape"] = None


class Node:
    """One executed primitive on a tape: inputs, output, and its VJP."""

    __slots__ = ("inputs", "output", "vjp", "tape", "index")

    def __init__(self, inputs, output, vjp, tape, index):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.tape = tape
        self.index = index


class Tape:
    """Computation record: primitives in execution (= topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._outer: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        global _active_tape
        self._outer = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = self._outer
        self._outer = None


def record() -> Tape:
    """Open a computation record; use as `with record() as tape:`."""
    return Tape()


def active_tape() -> Optional[Tape]:
    return _active_tape


class Tensor:
    """n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return powf(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def mean(self, axes=None, keepdims: bool = False):
        return mean(self, axes, keepdims)

    def sum(self, axes=None, keepdims: bool = False):
        return reduce_sum(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


# ---------------------------------------------------------------------------
# construction

def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    return shape


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype), requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=dtype), requires_grad)


def full(shape, value: float, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype), requires_grad)


def uniform(shape, lo: float, hi: float, seed, dtype=DEFAULT_DTYPE,
            requires_grad: bool = False) -> Tensor:
    """Seed-reproducible uniform fill over [lo, hi)."""
    if not lo < hi:
        raise InvalidArgument(f"uniform fill needs lo < hi, got [{lo}, {hi})")
    shape = _check_shape(shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, shape).astype(dtype), requires_grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# tape plumbing

def _trace(out: Tensor, inputs: tuple, vjp) -> Tensor:
    tape = _active_tape
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = Node(inputs, out, vjp, tape, len(tape.nodes))
    tape.nodes.append(node)
    out.node = node
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a full-shape gradient down to a broadcast operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _trace(out, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape) * -1.0

    return _trace(out, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _trace(out, (a, b), vjp)


def powf(x: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant real exponent."""
    p = float(exponent)
    xd = x.data
    out = Tensor(xd ** p)

    def vjp(g):
        return (g * (p * xd ** (p - 1.0)),)

    return _trace(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(np.maximum(xd, 0))

    def vjp(g):
        return (g * (xd > 0),)

    return _trace(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)

    def vjp(g):
        return (g * (s * (1.0 - s)),)

    return _trace(out, (x,), vjp)


def _normalize_axes(axes, rank: int) -> tuple:
    if axes is None:
        return tuple(range(rank))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    else:
        axes = tuple(int(a) for a in axes)
    norm = []
    for a in axes:
        if not -rank <= a < rank:
            raise ShapeError(f"axis {a} out of range for rank {rank}")
        norm.append(a % rank)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    xd = x.data
    n = 1
    for a in axes:
        n *= xd.shape[a]
    out = Tensor(xd.mean(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, xd.shape) / n,)

    return _trace(out, (x,), vjp)


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    xd = x.data
    out = Tensor(xd.sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _trace(out, (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects two rank-2 tensors, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _trace(out, (a, b), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    xd = x.data
    out = Tensor(xd.reshape(shape))

    def vjp(g):
        return (g.reshape(xd.shape),)

    return _trace(out, (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation of rank {x.ndim}")
    inv = np.argsort(axes)
    out = Tensor(x.data.transpose(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _trace(out, (x,), vjp)


def primitive(out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Register a custom primitive (used by conv2d and the fused loss)."""
    return _trace(Tensor(out_data), tuple(inputs), vjp)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`."""
    if loss.data.size != 1:
        raise InvalidArgument(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None:
        raise InvalidArgument("loss was not produced under an active computation record")
    loss.grad = np.ones_like(loss.data)
    for n in reversed(node.tape.nodes[: node.index + 1]):
        g = n.output.grad
        if g is None:
            continue
        for t, gi in zip(n.inputs, n.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            # never accumulate in place: vjp outputs may be shared or views
            t.grad = gi if t.grad is None else t.grad + gi
