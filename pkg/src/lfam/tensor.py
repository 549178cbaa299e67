"""Dense 4-D tensors and a reverse-mode differentiation tape.

Tensors are (batch, channels, height, width) arrays stored row-major.
Operations executed while a Tape is active append nodes in creation
order; backward() replays the nodes once, in reverse, and accumulates
gradients into every requires_grad tensor.  Without an active tape the
same functions are plain numpy computations.

Training code runs in float32; gradient checking must run in float64
because central differences are unreliable in single precision.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateWindowError,
    NumericalError,
    ShapeError,
)


class Tensor:
    """Dense real array of shape (n, c, h, w) with an optional gradient slot.

    Lower-rank input is left-padded with singleton axes, so a plain nested
    list behaves as a (1, 1, r, c) matrix.  Tensors are immutable after
    construction except for gradient accumulation into .grad (and parameter
    updates, which require exclusive access).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank must be <= 4, got shape {arr.shape}")
        if arr.ndim < 4:
            arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars stay scalars so float32 is not upcast

    def __add__(self, other):
        return add_const(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_const(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return mul_const(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul_const(self, 1.0 / other) if _is_scalar(other) else div(self, other)

    def __neg__(self):
        return neg(self)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


class _Node:
    """One recorded operation: output tensor plus a closure producing input grads."""

    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op: str, inputs: Sequence[Tensor], out: Tensor, vjp: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.out = out
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside appends one node, so
    topological order equals creation order.  A tape and the tensors recorded
    on it form a single-owner group: safe to hand to another thread, not safe
    to mutate from two threads at once.  Independent tapes may run in
    parallel (the active-tape stack is thread local).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.stack.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def _record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._out_ids.add(id(node.out))


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_TAPE_STACK = _TapeStack()


def _active_tape() -> Tape | None:
    return _TAPE_STACK.stack[-1] if _TAPE_STACK.stack else None


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap a forward result, recording the node if a tape is active."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._record(_Node(op, inputs, out, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad of every requires_grad tensor.

    Gradients add to whatever is already in .grad; callers zero between
    steps.  Flow buffers are private to each invocation, so running backward
    twice over the same tape doubles every gradient exactly.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = flows.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue  # output never reached the loss
        if node.out.requires_grad:
            _accumulate(node.out, g)
        input_grads = node.vjp(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None:
                continue
            if not (t.requires_grad or id(t) in tape._out_ids):
                continue  # constant leaf, nothing downstream wants this
            tid = id(t)
            if tid in flows:
                flows[tid] = flows[tid] + gi
            else:
                flows[tid] = gi
                holders[tid] = t
    for tid, g in flows.items():  # leaves: tensors never produced on this tape
        t = holders[tid]
        if t.requires_grad:
            _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast input."""
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a, b, "add")
    return _apply("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a, b, "sub")
    return _apply("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a, b, "mul")
    return _apply("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a, b, "div")
    return _apply("div", (a, b), a.data / b.data,
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


def add_const(a: Tensor, c: float) -> Tensor:
    return _apply("add_const", (a,), a.data + c, lambda g: (g,))


def mul_const(a: Tensor, c: float) -> Tensor:
    return _apply("mul_const", (a,), a.data * c, lambda g: (g * c,))


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for constant p; p == 0 gives ones with zero gradient."""
    if p == 0:
        out = np.ones_like(a.data)
        return _apply("pow_const", (a,), out, lambda g: (np.zeros_like(a.data),))
    out = a.data ** p
    return _apply("pow_const", (a,), out,
                  lambda g: (g * p * a.data ** (p - 1),))


def log(a: Tensor) -> Tensor:
    if a.data.min() <= 0:
        raise NumericalError(f"log of non-positive value {a.data.min()}")
    return _apply("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    return _apply("relu", (a,), np.maximum(a.data, 0),
                  lambda g: (g * (a.data > 0),))


# ---------------------------------------------------------------------------
# reductions and data movement


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.data.dtype).reshape(1, 1, 1, 1)
    return _apply("sum_all", (a,), out,
                  lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),))


def sum_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Sum over the given axes, keeping singleton dims so rank stays 4."""
    if any(ax not in (0, 1, 2, 3) for ax in axes):
        raise ContractError(f"sum_axes: invalid axes {axes}")
    out = a.data.sum(axis=axes, keepdims=True)
    return _apply("sum_axes", (a,), out,
                  lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),))


def reshape(a: Tensor, shape: tuple[int, int, int, int]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _apply("reshape", (a,), a.data.reshape(shape),
                  lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: tuple[int, int, int, int]) -> Tensor:
    if sorted(axes) != [0, 1, 2, 3]:
        raise ContractError(f"permute: {axes} is not a permutation of (0,1,2,3)")
    inv = tuple(int(np.argsort(axes)[i]) for i in range(4))
    return _apply("permute", (a,), a.data.transpose(axes),
                  lambda g: (g.transpose(inv),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _apply("concat_channels", (a, b), np.concatenate([a.data, b.data], axis=1),
                  lambda g: (g[:, :ca], g[:, ca:]))


def pad_bottom_right(a: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the bottom and right edges; used to round maps up to window multiples."""
    if pad_h < 0 or pad_w < 0:
        raise ContractError(f"pad_bottom_right: negative padding ({pad_h}, {pad_w})")
    _, _, h, w = a.shape
    out = np.pad(a.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    return _apply("pad_bottom_right", (a,), out, lambda g: (g[:, :, :h, :w],))


def crop_top_left(a: Tensor, h: int, w: int) -> Tensor:
    _, _, ah, aw = a.shape
    if h > ah or w > aw:
        raise ShapeError(f"crop_top_left: ({h}, {w}) exceeds map size {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, :, :h, :w] = g
        return (full,)

    return _apply("crop_top_left", (a,), a.data[:, :, :h, :w].copy(), vjp)


def window_split(a: Tensor, m: int) -> Tensor:
    """Partition (n, c, H, W) into disjoint m-by-m tiles: (n*N, c, m, m).

    H and W must already be multiples of m; windows are ordered row-major
    within each batch item, batch-major overall.
    """
    n, c, hh, ww = a.shape
    if hh % m or ww % m:
        raise ShapeError(f"window_split: {a.shape} not tileable by m={m}")
    rows, cols = hh // m, ww // m
    out = (a.data.reshape(n, c, rows, m, cols, m)
           .transpose(0, 2, 4, 1, 3, 5)
           .reshape(n * rows * cols, c, m, m))

    def vjp(g):
        back = (g.reshape(n, rows, cols, c, m, m)
                .transpose(0, 3, 1, 4, 2, 5)
                .reshape(n, c, hh, ww))
        return (back,)

    return _apply("window_split", (a,), out, vjp)


def window_merge(a: Tensor, n: int, h: int, w: int) -> Tensor:
    """Inverse of window_split: (n*N, c, m, m) back to (n, c, h, w)."""
    total, c, m, m2 = a.shape
    if m != m2:
        raise ShapeError(f"window_merge: tiles must be square, got {a.shape}")
    if h % m or w % m:
        raise ShapeError(f"window_merge: ({h}, {w}) not a multiple of m={m}")
    rows, cols = h // m, w // m
    if total != n * rows * cols:
        raise ShapeError(f"window_merge: {total} tiles cannot fill {n}x{h}x{w} with m={m}")
    out = (a.data.reshape(n, rows, cols, c, m, m)
           .transpose(0, 3, 1, 4, 2, 5)
           .reshape(n, c, h, w))

    def vjp(g):
        back = (g.reshape(n, c, rows, m, cols, m)
                .transpose(0, 2, 4, 1, 3, 5)
                .reshape(total, c, m, m))
        return (back,)

    return _apply("window_merge", (a,), out, vjp)


# ---------------------------------------------------------------------------
# matrix products


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product contracting the last two axes.

    Shapes (B, G, r, k) @ (B, G, k, c) -> (B, G, r, c); leading axes must
    match exactly.
    """
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"bmm: leading dims differ, {a.shape} vs {b.shape}")
    if a.shape[3] != b.shape[2]:
        raise ShapeError(f"bmm: inner dims differ, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return (ga, gb)

    return _apply("bmm", (a, b), out, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain matrix product of tensors viewed as (1, 1, r, k) and (1, 1, k, c)."""
    if a.shape[:2] != (1, 1) or b.shape[:2] != (1, 1):
        raise ShapeError(f"matmul expects (1,1,r,k) matrices, got {a.shape} x {b.shape}")
    if a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return bmm(a, b)


# ---------------------------------------------------------------------------
# softmax


def _softmax(a: Tensor, axis: int, mask: np.ndarray | None, op: str) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NumericalError(f"{op}: logits contain non-finite values")
    x = a.data
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mb = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if (~mb).all(axis=axis).any():
            raise DegenerateWindowError(f"{op}: a row has every position masked")
        rowmax = np.max(np.where(mb, x, -np.inf), axis=axis, keepdims=True)
        e = np.where(mb, np.exp(np.where(mb, x - rowmax, 0.0)), 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _apply(op, (a,), p, vjp)


def masked_softmax(logits: Tensor, mask: np.ndarray | None) -> Tensor:
    """Softmax over the last axis; masked positions output exactly 0.

    mask is a boolean array broadcastable to logits, True marking real
    positions.  Unmasked outputs sum to 1 per row; a fully masked row is a
    degenerate window and raises.
    """
    return _softmax(logits, 3, mask, "masked_softmax")


def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    """Unmasked softmax, default over the channel axis (class probabilities)."""
    return _softmax(logits, axis, None, "softmax")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f must be a deterministic scalar-valued function of one tensor.  The
    check always runs in float64; the relative error for element i is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    base = np.asarray(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    if y.data.size != 1:
        raise ContractError(f"grad_check: f returned shape {y.shape}, expected scalar")
    if not np.isfinite(y.data).all():
        raise NumericalError("grad_check: f(x) is non-finite")
    backward(tape, y)
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(base)).ravel()
    if not np.isfinite(analytic).all():
        raise NumericalError("grad_check: analytic gradient is non-finite")

    flat = base.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        fp = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] = flat[i] - eps
        fm = f(Tensor(bumped.reshape(base.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"grad_check: non-finite evaluation at element {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# serialization: magic "LFT1", four little-endian uint32 dims, float32 payload

_MAGIC = b"LFT1"


def tensor_to_bytes(t: Tensor) -> bytes:
    n, c, h, w = t.shape
    return _MAGIC + struct.pack("<4I", n, c, h, w) + t.data.astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor record, returning it and the offset past the record."""
    if buf[offset:offset + 4] != _MAGIC:
        raise ContractError("tensor record: bad magic bytes")
    dims = struct.unpack_from("<4I", buf, offset + 4)
    count = int(np.prod(dims))
    start = offset + 20
    end = start + 4 * count
    if end > len(buf):
        raise ContractError("tensor record: truncated payload")
    data = np.frombuffer(buf[start:end], dtype="<f4").reshape(dims)
    return Tensor(data.astype(np.float32)), end


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        t, _ = tensor_from_bytes(fh.read())
    return t
