"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input has ``requires_grad``; otherwise they are plain numpy calls.
A tape and everything recorded on it belong to the thread that opened it.
"""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels

CHECK_FINITE = os.environ.get("I2IC_CHECK_FINITE", "1").strip() not in {"0", "false", "no", "off"}

_DTYPES = {32: np.float32, 64: np.float64}
_dtype: type = np.float32


class ShapeError(ValueError):
    """Inputs do not conform to a primitive's shape rule."""


class TapeError(RuntimeError):
    pass


def get_dtype() -> type:
    return _dtype


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    _dtype = _DTYPES[bits]


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(64 if previous is np.float64 else 32)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_producer", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or _dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._producer: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._producer = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass(eq=False)
class _Node:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        producer = loss._producer
        if producer is None or not any(node is producer for node in self.nodes):
            raise TapeError("loss was not produced on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or inp is None or not inp.requires_grad:
                    continue
                if inp._producer is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _finish(name: str, out: np.ndarray, inputs: tuple, bwd: Callable) -> Tensor:
    if CHECK_FINITE and not np.isfinite(out).all():
        raise FloatingPointError(f"{name}: non-finite values in output")
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(i is not None and i.requires_grad for i in inputs):
        node = _Node(name, inputs, t, bwd)
        t.requires_grad = True
        t._producer = node
        tape.nodes.append(node)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(name: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a} and {b}") from None


# ---------------------------------------------------------------------------
# forward kernels (plain numpy, usable with complex inputs for JVP checks)


def conv2d_forward(x, w, b, stride):
    n = x.shape[0]
    o, _, k, _ = w.shape
    pad = k // 2
    cols = kernels.im2col(x, k, stride, pad)
    ho = kernels.out_size(x.shape[2], k, stride, pad)
    wo = kernels.out_size(x.shape[3], k, stride, pad)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), cols


def silu_forward(x):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def upsample2x_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


# ---------------------------------------------------------------------------
# primitives


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero 'same' padding (k // 2) and stride 1 or 2."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    out, cols = conv2d_forward(x.data, w.data, None if b is None else b.data, stride)

    def bwd(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(w.data.reshape(o, -1).T @ g2, x.shape, kh, stride, kh // 2)
        return gx, gw, gb

    return _finish("conv2d", out, (x, w, b), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _finish("upsample2x", upsample2x_forward(x.data), (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a.shape, b.shape)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a.shape, b.shape)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", a.data * b.data, (a, b), bwd)


def silu(x: Tensor) -> Tensor:
    out, s = silu_forward(x.data)

    def bwd(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _finish("silu", out, (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear: expected 2-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[1]} does not match weight width {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape[0]} outputs")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bwd(g):
        return g @ w.data, g.T @ x.data, (g.sum(axis=0) if b is not None else None)

    return _finish("linear", out, (x, w, b), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the channel axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            p != q for i, (p, q) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(lo, hi), axis=axis))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _finish("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: range [{start}, {stop}) invalid for {c} channels")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _finish("slice_channels", np.ascontiguousarray(x.data[:, start:stop]), (x,), bwd)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a broadcast scalar constant."""

    def bwd(g):
        return (g * factor,)

    return _finish("scale", x.data * x.data.dtype.type(factor), (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def bwd(g):
        return (g.reshape(x.shape),)

    return _finish("reshape", out, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bwd(g):
        return (np.full_like(x.data, g / n),)

    return _finish("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), bwd)


def sse(a: Tensor, b: Tensor, reduction: str = "mean") -> Tensor:
    """Squared-error reduction ``sum((a-b)^2)`` or its mean."""
    if a.shape != b.shape:
        raise ShapeError(f"sse: shapes differ, {a.shape} vs {b.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"sse: unknown reduction {reduction!r}")
    diff = a.data - b.data
    total = (diff * diff).sum()
    factor = 1.0 / diff.size if reduction == "mean" else 1.0
    out = np.asarray(total * factor, dtype=a.dtype)

    def bwd(g):
        ga = (2.0 * factor) * g * diff
        return ga, -ga

    return _finish("sse", out, (a, b), bwd)
