"""Dense float32 tensors with reverse-mode automatic differentiation.

Ops execute eagerly on numpy buffers.  While a GradTape is active, every
op whose inputs require gradients appends a record; replaying records in
reverse gives reverse topological order because they were appended in
execution order.  Two replay entry points exist:

* ``tape.backward(loss)`` populates ``.grad`` on every requires_grad
  tensor reachable from ``loss``.
* ``tape.gradient(loss, sources)`` returns gradients for ``sources``
  without touching any ``.grad`` buffer (used for input perturbations,
  which must leave model parameter grads alone).

Broadcasting is deliberately restricted to scalar-vs-tensor; the one
batched exception is ``add_bias`` for (B,D)+(D,) which has an explicit
backward rule.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "add_bias",
    "conv2d",
    "relu",
    "tsum",
    "tmean",
    "texp",
    "tlog",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "take_per_row",
    "concat_cols",
    "reshape",
]


class Tensor:
    """A dense float32 array, optionally participating in the grad tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalars mean python numbers, not 0-d tensors
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

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ContractError("tensor/tensor division is not part of the op family")
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


# --------------------------------------------------------------------------
# tape machinery
# --------------------------------------------------------------------------

_TAPE_STACK: list["GradTape"] = []
_GRAD_ENABLED: bool = True


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Ordered record of primitive ops for one forward pass.

    The tape is cleared after each backward/gradient replay unless
    ``retain=True`` is passed, matching the rebuild-per-step training
    structure (one tape per optimisation step).
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def _append(self, record: _Record) -> None:
        self._records.append(record)

    def watches(self, t: Tensor) -> bool:
        """True if ``t`` appears as an input or output of any record."""
        for rec in self._records:
            if rec.out is t or any(inp is t for inp in rec.inputs):
                return True
        return False

    def _replay(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g_out = grads.get(id(rec.out))
            if g_out is None:
                continue
            g_inputs = rec.backward(g_out)
            for inp, g in zip(rec.inputs, g_inputs):
                if g is None:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = g if acc is None else acc + g
        return grads

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from loss."""
        grads = self._replay(loss)
        seen: dict[int, Tensor] = {}
        for rec in self._records:
            seen[id(rec.out)] = rec.out
            for inp in rec.inputs:
                seen[id(inp)] = inp
        seen[id(loss)] = loss
        for tid, t in seen.items():
            if not t.requires_grad:
                continue
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g if t.grad is None else t.grad + g
        if not retain:
            self._records.clear()

    def gradient(self, loss: Tensor, sources: Sequence[Tensor], retain: bool = False) -> list[np.ndarray]:
        """Gradients of loss w.r.t. sources; never writes any ``.grad``."""
        for src in sources:
            if src is not loss and not self.watches(src):
                raise ContractError("gradient(): source tensor is not on this tape")
        grads = self._replay(loss)
        out = []
        for src in sources:
            g = grads.get(id(src))
            out.append(np.zeros_like(src.data) if g is None else g)
        if not retain:
            self._records.clear()
        return out


class no_grad:
    """Context manager disabling tape recording for its body."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def _active_tape() -> GradTape | None:
    if _GRAD_ENABLED and _TAPE_STACK:
        return _TAPE_STACK[-1]
    return None


def _make_out(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape._append(_Record(out, inputs, backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) or (isinstance(x, np.generic) and np.isscalar(x))


# --------------------------------------------------------------------------
# elementwise and scalar ops
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    a = _as_tensor(a)
    if _is_scalar(b):
        s = np.float32(b)
        return _make_out(a.data + s, (a,), lambda g: (g,))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return _make_out(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(a):
        a_s = np.float32(a)
        b = _as_tensor(b)
        return _make_out(a_s - b.data, (b,), lambda g: (-g,))
    a = _as_tensor(a)
    if _is_scalar(b):
        s = np.float32(b)
        return _make_out(a.data - s, (a,), lambda g: (g,))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _make_out(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    a = _as_tensor(a)
    if _is_scalar(b):
        s = np.float32(b)
        return _make_out(a.data * s, (a,), lambda g: (g * s,))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    a_data, b_data = a.data, b.data
    return _make_out(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def texp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _make_out(out_data, (a,), lambda g: (g * out_data,))


def tlog(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    a_data = a.data
    return _make_out(np.log(a_data), (a,), lambda g: (g / a_data,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, np.float32(0.0))
    # out > 0 iff input > 0, so the mask costs nothing on no-grad paths
    return _make_out(out_data, (a,), lambda g: (g * (out_data > 0),))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _make_out(a_data @ b_data, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast add: (B,D) + (D,). The one sanctioned non-scalar broadcast."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError("add_bias", x.shape, bias.shape)
    return _make_out(x.data + bias.data[None, :], (x, bias), lambda g: (g, g.sum(axis=0)))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    in_shape = a.shape
    return _make_out(a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two 2-d tensors along axis 1."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError("concat_cols", a.shape, b.shape)
    na = a.shape[1]
    return _make_out(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :na], g[:, na:]),
    )


def take_per_row(x: Tensor, idx) -> Tensor:
    """out[i] = x[i, idx[i]] for a 2-d tensor; idx is a constant int vector."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError("take_per_row", x.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ContractError(f"take_per_row: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    in_shape = x.shape

    def backward(g):
        gx = np.zeros(in_shape, dtype=np.float32)
        gx[rows, idx] = g  # one column per row, no collisions
        return (gx,)

    return _make_out(x.data[rows, idx], (x,), backward)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def _norm_axis(axis, ndim) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    in_shape = a.shape

    def backward(g):
        if ax is None:
            return (np.broadcast_to(g, in_shape).astype(np.float32, copy=True),)
        gs = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gs, in_shape).astype(np.float32, copy=True),)

    return _make_out(a.data.sum(axis=ax, keepdims=keepdims, dtype=np.float32), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    in_shape = a.shape
    if ax is None:
        count = a.size
    else:
        count = math.prod(in_shape[i] for i in ax)
    inv = np.float32(1.0 / count)

    def backward(g):
        if ax is None:
            return (np.broadcast_to(g * inv, in_shape).astype(np.float32, copy=True),)
        gs = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gs * inv, in_shape).astype(np.float32, copy=True),)

    return _make_out(a.data.mean(axis=ax, keepdims=keepdims, dtype=np.float32), (a,), backward)


# --------------------------------------------------------------------------
# normalisations
# --------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _make_out(s, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make_out(out_data, (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = _as_tensor(a)
    norm = np.sqrt((a.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps).astype(np.float32)
    y = a.data / norm

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return _make_out(y, (a,), backward)


# --------------------------------------------------------------------------
# convolution (channels-last im2col + large sgemms)
# --------------------------------------------------------------------------

def _conv_out_size(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, NHWC input and (KH,KW,C,O) weight, no bias.

    Channels-last keeps the im2col patch matrix, the output, and every
    backward operand in plain row-major order, so all three gemms run on
    contiguous buffers with no permuted copies.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, h, w, c = x.shape
    kh, kw, _, o = weight.shape
    oh, ow = _conv_out_size(h, kh, stride, padding), _conv_out_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, weight.shape)
    k = kh * kw * c
    p = oh * ow

    if padding:
        xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=np.float32)
        xp[:, padding : padding + h, padding : padding + w, :] = x.data
    else:
        xp = x.data
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    cols2 = cols.reshape(n * p, k)
    w_mat = weight.data.reshape(k, o)
    out = (cols2 @ w_mat).reshape(n, oh, ow, o)

    def backward(g):
        gm = g.reshape(n * p, o)
        gw = (cols2.T @ gm).reshape(kh, kw, c, o)
        gcols = (gm @ w_mat.T).reshape(n, oh, ow, kh, kw, c)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gcols[:, :, :, i, j, :]
        if padding:
            return gxp[:, padding : padding + h, padding : padding + w, :], gw
        return gxp, gw

    return _make_out(out, (x, weight), backward)


# --------------------------------------------------------------------------
# standalone helpers used across modules
# --------------------------------------------------------------------------

def unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """L2-normalise rows of a plain array (float32 result)."""
    x = np.asarray(x, dtype=np.float32)
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
    return (x / np.maximum(norms, eps)).astype(np.float32)
