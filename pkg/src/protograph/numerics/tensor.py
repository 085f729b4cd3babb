"""Dense fp64 tensors with reverse-mode automatic differentiation.

Every operation records onto the active :class:`Tape` (if one is open and
an input requires gradients).  Backward walks the tape in reverse append
order, which is a valid topological order because operations can only
consume tensors that already exist.  Gradients are plain numpy arrays;
backward closures never re-enter the tape, so differentiation is strictly
first-order.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "backward",
    "set_debug_checks",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "logistic",
    "softmax",
    "log_softmax",
    "tsum",
    "tmean",
    "sq_euclid",
    "euclid",
    "concat",
    "narrow",
    "roll_rows",
    "tile_rows",
    "pick",
    "reshape",
    "detach",
    "conv2d",
    "maxpool2d",
    "batchnorm2d",
    "global_avg_pool",
]

_local = threading.local()

# When enabled, every forward result is checked for NaN/Inf.  Off by default
# because the check costs a full pass over the data.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    """A dense float64 array that can participate in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the free functions do the real work.
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

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class _Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor,
                 bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Append-only record of operations for one unit of differentiable work.

    Use as a context manager; nesting is not supported (one unit of work per
    thread at a time).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.tape = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad of every requires_grad leaf with dLoss/d(leaf).

        Intermediate results keep their gradients internal to the walk; only
        tensors that were never produced by a taped op receive a .grad.
        """
        if loss.data.shape != ():
            raise ValueError(
                f"backward needs a scalar loss, got shape {loss.data.shape}")
        produced = {id(n.out) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.array(1.0)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.out), None)
            holders.pop(id(node.out), None)
            if gout is None:
                continue
            for inp, g in zip(node.inputs, node.bwd(gout)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.asarray(g, dtype=np.float64)
                    holders[key] = inp
        for key, g in grads.items():
            if key not in produced:
                holders[key].accumulate_grad(g)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"operation '{op}' produced non-finite values")
    tape = _active_tape()
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req and tape is not None)
    if tape is not None and req:
        tape.nodes.append(_Node(op, inputs, out, bwd))
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate through the active tape from a scalar loss."""
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() requires an active Tape")
    tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the input shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", (a, b), out, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (-g,)

    return _record("neg", (a,), -a.data, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors; gradients are g@b.T and a.T@g."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0  # subgradient at 0 is 0

    def bwd(g):
        return (g * mask,)

    return _record("relu", (x,), out, bwd)


def logistic(x) -> Tensor:
    x = _as_tensor(x)
    # Split by sign to avoid overflow in exp.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    s = out

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record("logistic", (x,), out, bwd)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _record("softmax", (x,), s, bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bwd(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (x,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("sum", (x,), out, bwd)


def tmean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.data.shape
    n = x.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, shape).copy(),)

    return _record("mean", (x,), out, bwd)


# ---------------------------------------------------------------------------
# distances


def sq_euclid(a, b) -> Tensor:
    """Squared Euclidean distance between two equal-length vectors (scalar out)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"sq_euclid length mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = np.float64((diff * diff).sum())

    def bwd(g):
        return g * 2.0 * diff, g * (-2.0) * diff

    return _record("sq_euclid", (a, b), np.asarray(out), bwd)


def euclid(a, b) -> Tensor:
    """Root Euclidean distance; subgradient 0 at coincident points."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"euclid length mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum())

    def bwd(g):
        if d == 0.0:
            z = np.zeros_like(diff)
            return z, z
        return g * diff / d, g * (-diff) / d

    return _record("euclid", (a, b), np.asarray(d), bwd)


# ---------------------------------------------------------------------------
# structural ops


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of empty sequence")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _record("concat", tuple(parts), out, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    x = _as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx].copy()
    shape = x.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float64)
        full[idx] = g
        return (full,)

    return _record("narrow", (x,), out, bwd)


def roll_rows(x: Tensor, shift: int) -> Tensor:
    x = _as_tensor(x)
    out = np.roll(x.data, shift, axis=0)

    def bwd(g):
        return (np.roll(g, -shift, axis=0),)

    return _record("roll_rows", (x,), out, bwd)


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a (1, d) row n times to (n, d)."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ValueError(f"tile_rows expects a (1, d) row, got {x.data.shape}")
    out = np.repeat(x.data, n, axis=0)

    def bwd(g):
        return (g.sum(axis=0, keepdims=True),)

    return _record("tile_rows", (x,), out, bwd)


def pick(x: Tensor, index: int) -> Tensor:
    """Select one entry of a vector as a scalar."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ValueError(f"pick expects a vector, got shape {x.data.shape}")
    out = np.asarray(x.data[index])
    shape = x.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _record("pick", (x,), out, bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    src = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(src),)

    return _record("reshape", (x,), out, bwd)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# convolutional ops (NCHW, float64)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> (B*H*W, C*9) patches for 3x3 stride-1 pad-1 convolution."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # win: (B, C, H, W, 3, 3) -> (B, H, W, C, 3, 3)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
    return cols


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, no bias.

    x: (B, C_in, H, W), w: (C_out, C_in, 3, 3) -> (B, C_out, H, W).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    b, cin, h, wd = x.data.shape
    cout = w.data.shape[0]
    if w.data.shape != (cout, cin, 3, 3):
        raise ValueError(
            f"conv2d weight shape {w.data.shape} incompatible with input {x.data.shape}")
    cols = _im2col(x.data)
    wmat = w.data.reshape(cout, cin * 9).T  # (C_in*9, C_out)
    out = (cols @ wmat).reshape(b, h, wd, cout).transpose(0, 3, 1, 2)
    wdat = w.data

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * h * wd, cout)
        gw = (cols.T @ gmat).T.reshape(cout, cin, 3, 3)
        # dx is a full correlation of g with the spatially flipped kernels.
        gcols = _im2col(g)  # (B*H*W, C_out*9)
        wrot = wdat[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(cout * 9, cin)
        gx = (gcols @ wrot).reshape(b, h, wd, cin).transpose(0, 3, 1, 2)
        return gx, gw

    return _record("conv2d", (x, w), out, bwd)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first maximum."""
    x = _as_tensor(x)
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    blocks = (x.data.reshape(b, c, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(b, c, h // 2, w // 2, 4))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros((b, c, h // 2, w // 2, 4), dtype=np.float64)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(b, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(b, c, h, w))
        return (gx,)

    return _record("maxpool2d", (x,), out, bwd)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization with affine parameters.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place; evaluation mode reads the buffers
    and leaves them untouched.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    b, c, h, w = x.data.shape
    m = b * h * w
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    xc = x.data - mean[None, :, None, None]

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if not training:
            gx = gxhat * inv[None, :, None, None]
            return gx, ggamma, gbeta
        gvar = (gxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv ** 3
        gmean = (-(gxhat.sum(axis=(0, 2, 3))) * inv
                 + gvar * (-2.0 / m) * xc.sum(axis=(0, 2, 3)))
        gx = (gxhat * inv[None, :, None, None]
              + gvar[None, :, None, None] * 2.0 * xc / m
              + gmean[None, :, None, None] / m)
        return gx, ggamma, gbeta

    return _record("batchnorm2d", (x, gamma, beta), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    x = _as_tensor(x)
    b, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).copy(),)

    return _record("global_avg_pool", (x,), out, bwd)
