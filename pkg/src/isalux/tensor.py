"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

Values are stored as float32. Every reduction (matmul, conv, pooling,
normalization statistics, softmax, sums) accumulates in float64 and rounds
back to float32 once per op output, which keeps finite-difference gradient
checks tight at f32 storage; single-rounding elementwise ops run in f32.

A per-thread tape records one entry per differentiable operation, in
execution order (a topological order by construction). `backward` walks the
tape once, in reverse, and accumulates gradients into leaf tensors. Worker
threads get their own tape, so read-only evaluation never interleaves with
a training thread's records.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "tensor",
    "active_tape",
    "reset_tape",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "conv2d",
    "layer_norm",
    "softmax",
    "gelu",
    "global_avg_pool",
    "resize_bilinear",
    "nearest_upsample",
    "concat_channels",
    "concat_last",
    "channel_slice",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "tabs",
    "powf",
    "clamp",
    "clamp_min_abs",
]

F32 = np.float32
F64 = np.float64

# Storage dtype for tensor values. float32 is the artifact's contract; the
# float64 mode exists for high-precision gradient verification, where finite
# differences need headroom below the f32 rounding floor.
_STORAGE_DTYPE = np.float32


@contextlib.contextmanager
def storage_dtype(dtype):
    global _STORAGE_DTYPE
    prev = _STORAGE_DTYPE
    _STORAGE_DTYPE = dtype
    try:
        yield
    finally:
        _STORAGE_DTYPE = prev


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A dense float32 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_STORAGE_DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are rank 0..4, got rank {arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values; gradients do not flow back."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor that always requires gradient."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class ParamStore:
    """Ordered registry of named parameters; the unit of checkpointing."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def named(self) -> list[tuple[str, Parameter]]:
        return list(self._params.items())

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def count(self) -> int:
        return sum(p.size for p in self._params.values())


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_STORAGE_DTYPE))


# ---------------------------------------------------------------------------
# Tape


@dataclass
class TapeRecord:
    inputs: tuple
    output: Tensor
    backward_fn: Callable  # maps dL/d(output) f64 array -> per-input f64 arrays


class Tape:
    """Ordered record of executed operations; execution order is topological."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def append(self, rec: TapeRecord) -> None:
        self.records.append(rec)

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


class _TapeState(threading.local):
    """Per-thread tape and recording flag, so read-only work in worker
    threads (metric evaluation) cannot interleave records with a training
    thread's tape."""

    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_STATE = _TapeState()


def active_tape() -> Tape:
    return _STATE.tape


def reset_tape() -> None:
    """Drop all recorded operations (start of a fresh training step)."""
    _STATE.tape.clear()


def grad_enabled() -> bool:
    return _STATE.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, metrics)."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _STATE.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        _STATE.tape.append(TapeRecord(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad for every leaf reachable from `loss` through the tape.

    Gradients accumulate across calls; zero_grad first for fresh values.
    The walk visits each tape record exactly once, in reverse order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=F64)}
    for rec in reversed(_STATE.tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for t, ig in zip(rec.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if t._is_leaf:
                if t.grad is None:
                    t.grad = np.zeros(t.shape, dtype=_STORAGE_DTYPE)
                t.grad += ig.astype(_STORAGE_DTYPE)
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = np.asarray(ig, dtype=F64)


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _record(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data.astype(F64) / b.data.astype(F64))

    def bwd(g):
        bd = b.data.astype(F64)
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * a.data.astype(F64) / (bd * bd), b.shape),
        )

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data.astype(F64) * s)
    return _record(out, (a,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when leading dims match, or a batched left
    operand against a plain 2D right operand (a shared linear map)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    shared_rhs = a.ndim > 2 and b.ndim == 2
    if not shared_rhs and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims must match: {a.shape} @ {b.shape}")
    out = Tensor(a.data.astype(F64) @ b.data.astype(F64))

    def bwd(g):
        ad = a.data.astype(F64)
        bd = b.data.astype(F64)
        da = g @ bd.swapaxes(-1, -2)
        if shared_rhs:
            k, n = b.shape
            db = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            db = ad.swapaxes(-1, -2) @ g
        return da, db

    return _record(out, (a, b), bwd)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """2D cross-correlation of an NCHW batch with an (Cout,Cin,kh,kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and 4D kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, ck, kh, kw = kernel.shape
    if ck != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin} channels, kernel expects {ck}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty for input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # (n, cin, oh, ow, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, cin * kh * kw).astype(F64)
    wmat = kernel.data.reshape(cout, -1).astype(F64)
    out_flat = cols @ wmat.T  # (n, oh*ow, cout)
    out_arr = out_flat.transpose(0, 2, 1).reshape(n, cout, oh, ow)
    if bias is not None:
        out_arr = out_arr + bias.data.astype(F64).reshape(1, cout, 1, 1)
    out = Tensor(out_arr)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, cout)
        dw = np.einsum("npo,npk->ok", gm, cols).reshape(kernel.shape)
        dcols = (gm @ wmat).reshape(n, oh, ow, cin, kh, kw)
        hp, wp = h + 2 * p, w + 2 * p
        dxp = np.zeros((n, cin, hp, wp), dtype=F64)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        db = None if bias is None else g.sum(axis=(0, 2, 3))
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# normalization and activations


def layer_norm(x: Tensor, scl: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis per spatial location, then affine.

    Accepts NCHW (normalizes axis 1) or (N, C) inputs; scale/shift are (C,).
    """
    if x.ndim == 4:
        c = x.shape[1]
        bshape = (1, c, 1, 1)
    elif x.ndim == 2:
        c = x.shape[1]
        bshape = (1, c)
    else:
        raise ShapeError(f"layer_norm expects NCHW or (N,C), got {x.shape}")
    if scl.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"layer_norm scale/shift must be ({c},)")

    xd = x.data.astype(F64)
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = Tensor(xhat * scl.data.astype(F64).reshape(bshape) + shift.data.astype(F64).reshape(bshape))

    def bwd(g):
        red = tuple(i for i in range(x.ndim) if i != 1)
        dscl = (g * xhat).sum(axis=red)
        dshift = g.sum(axis=red)
        dxhat = g * scl.data.astype(F64).reshape(bshape)
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = ivar * (dxhat - m1 - xhat * m2)
        return dx, dscl, dshift

    return _record(out, (x, scl, shift), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; outputs are nonnegative and sum to one."""
    xd = x.data.astype(F64)
    xs = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(xs)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (fixed choice; matches erf form to ~1e-3)."""
    xd = x.data.astype(F64)
    u = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t))

    def bwd(g):
        sech2 = 1.0 - t * t
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * sech2 * du),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape and resampling ops


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.astype(F64).mean(axis=(2, 3)))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)),)

    return _record(out, (x,), bwd)


def _lin_coeffs(in_size: int, out_size: int):
    # half-pixel-center sampling (align_corners=False), clamped at edges
    src = (np.arange(out_size, dtype=F64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w = src - i0
    return i0, i1, w


def resize_bilinear(
    x: Tensor,
    out_h: Optional[int] = None,
    out_w: Optional[int] = None,
    factor: Optional[float] = None,
) -> Tensor:
    """Bilinear resample of an NCHW batch to (out_h, out_w) or by `factor`."""
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if factor is not None:
        if out_h is not None or out_w is not None:
            raise ShapeError("resize_bilinear takes extents or a factor, not both")
        out_h = int(round(h * factor))
        out_w = int(round(w * factor))
    if not out_h or not out_w or out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear target {out_h}x{out_w} invalid")
    y0, y1, wy = _lin_coeffs(h, out_h)
    x0, x1, wx = _lin_coeffs(w, out_w)
    xd = x.data.astype(F64)
    rows = xd[:, :, y0, :] * (1.0 - wy)[None, None, :, None] + xd[:, :, y1, :] * wy[None, None, :, None]
    vals = rows[:, :, :, x0] * (1.0 - wx) + rows[:, :, :, x1] * wx
    out = Tensor(vals)

    def bwd(g):
        drows = np.zeros((n, c, out_h, w), dtype=F64)
        np.add.at(drows, (slice(None), slice(None), slice(None), x0), g * (1.0 - wx))
        np.add.at(drows, (slice(None), slice(None), slice(None), x1), g * wx)
        dx = np.zeros((n, c, h, w), dtype=F64)
        dr = drows * (1.0 - wy)[None, None, :, None]
        dr1 = drows * wy[None, None, :, None]
        np.add.at(dx.transpose(0, 1, 3, 2), (slice(None), slice(None), slice(None), y0), dr.transpose(0, 1, 3, 2))
        np.add.at(dx.transpose(0, 1, 3, 2), (slice(None), slice(None), slice(None), y1), dr1.transpose(0, 1, 3, 2))
        return (dx,)

    return _record(out, (x,), bwd)


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Integer-factor nearest-neighbor upsampling of an NCHW batch."""
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample expects NCHW, got {x.shape}")
    f = int(factor)
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, f, axis=2), f, axis=3))

    def bwd(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _record(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW batches along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW operands")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels extents differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return _record(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def batch_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along the leading axis."""
    out = Tensor(x.data[start:stop])

    def bwd(g):
        dx = np.zeros(x.shape, dtype=F64)
        dx[start:stop] = g
        return (dx,)

    return _record(out, (x,), bwd)


def concat_batch(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading axis."""
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))

    def bwd(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), bwd)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ShapeError("concat_last needs at least one operand")
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))

    def bwd(g):
        return tuple(g[..., offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), bwd)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous channel block [start, stop) of an NCHW or (..., C) tensor."""
    if x.ndim == 4:
        out = Tensor(x.data[:, start:stop])

        def bwd(g):
            dx = np.zeros(x.shape, dtype=F64)
            dx[:, start:stop] = g
            return (dx,)

    else:
        out = Tensor(x.data[..., start:stop])

        def bwd(g):
            dx = np.zeros(x.shape, dtype=F64)
            dx[..., start:stop] = g
            return (dx,)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return _record(out, (x,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------------------
# reductions and pointwise tails


def tsum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.astype(F64).sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape),)

    return _record(out, (x,), bwd)


def tmean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]
    out = Tensor(x.data.astype(F64).mean(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape),)
        gg = np.expand_dims(g, axis) / count
        return (np.broadcast_to(gg, x.shape),)

    return _record(out, (x,), bwd)


def tabs(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    return _record(out, (x,), lambda g: (g * np.sign(x.data),))


def powf(x: Tensor, p: float) -> Tensor:
    """x**p for strictly positive x (used for exponent-weighted products)."""
    p = float(p)
    xd = x.data.astype(F64)
    out = Tensor(xd**p)
    return _record(out, (x,), lambda g: (g * p * xd ** (p - 1.0),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data > lo) & (x.data < hi)
    return _record(out, (x,), lambda g: (g * inside,))


def clamp_min_abs(x: Tensor, m: float) -> Tensor:
    """Push values inside (-m, m) out to +-m, keeping sign (0 maps to +m)."""
    sign = np.where(x.data < 0, -1.0, 1.0)
    small = np.abs(x.data) < m
    out = Tensor(np.where(small, sign * m, x.data.astype(F64)))
    return _record(out, (x,), lambda g: (g * ~small,))


# ---------------------------------------------------------------------------
# initializers


def conv_init(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int) -> np.ndarray:
    """He-style normal init for conv kernels feeding smooth activations."""
    std = math.sqrt(2.0 / (cin * kh * kw))
    return (rng.standard_normal((cout, cin, kh, kw)) * std).astype(F32)


def linear_init(rng: np.random.Generator, rows: int, cols: int, std: Optional[float] = None) -> np.ndarray:
    if std is None:
        std = math.sqrt(1.0 / rows)
    return (rng.standard_normal((rows, cols)) * std).astype(F32)
