"""Dense float tensors with a reverse-mode differentiation tape.

Everything the segmentation network needs is provided as explicit
primitives on 4-d ``(N, C, H, W)`` arrays: same-padded convolution,
2x2 max pooling, exact factor-2 bilinear upsampling, pointwise
nonlinearities, channel concatenation/slicing, channel softmax, batch
normalization and plain elementwise arithmetic.  Each primitive has a
hand-derived backward rule; recording happens only while a `Tape` is
active, so inference runs allocation-lean with no graph retained.

Tensors are float32 by default.  Gradient-check suites build the same
graphs in float64 (pass ``dtype=np.float64`` when creating leaves).
"""

from __future__ import annotations

import os
from math import floor
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


class UsageError(RuntimeError):
    """Raised when the tape / gradient API is used out of contract."""


_debug_finite = os.environ.get("ULSTM_DEBUG", "0") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf checking after every forward primitive (slow)."""
    global _debug_finite
    _debug_finite = bool(enabled)


class Tensor:
    """A dense float array plus an optional gradient buffer.

    Tensors created directly are *leaves*: when ``requires_grad`` is set,
    `Tape.backward` accumulates into ``grad``.  Tensors produced by
    primitives are interior nodes; their gradients live only transiently
    inside the backward sweep.  Data is treated as immutable after
    creation (the optimizer's in-place parameter update is the one
    sanctioned exception, and it happens only between tapes).
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._leaf = True

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Underlying array (shared, do not mutate)."""
        return self.data

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this data, cut off from any tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._leaf = True
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # Thin operator sugar over the module-level primitives.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not a supported primitive")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if not self._leaf:
            flags.append("node")
        tail = (", " + ",".join(flags)) if flags else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tail})"


_tape_stack: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Ordered record of primitive applications for reverse-mode sweeps.

    Usage::

        with Tape() as tape:
            loss = ...            # primitives record themselves
        tape.backward(loss)       # leaf .grad buffers populated
        tape.clear()              # frees every recorded intermediate

    Backward replays the records in reverse order, accumulating each
    leaf's gradient exactly once per use.  Calling backward twice
    without clearing leaf grads accumulates additively.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._out_index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._out_index[id(out)] = len(self._nodes)
        self._nodes.append((out, inputs, backward))

    def clear(self) -> None:
        self._nodes.clear()
        self._out_index.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        last = self._out_index.get(id(loss))
        if last is None:
            raise UsageError("loss tensor was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        for out, inputs, backward_fn in reversed(self._nodes[: last + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            input_grads = backward_fn(g)
            for t, ig in zip(inputs, input_grads):
                if ig is None or not t.requires_grad:
                    continue
                if t._leaf:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += ig
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig


def backward(loss: Tensor) -> None:
    """Run the active tape's backward sweep from ``loss``."""
    tape = active_tape()
    if tape is None:
        raise UsageError("no active tape; run the forward pass inside `with Tape() as t:`")
    tape.backward(loss)


def _make_output(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if _debug_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward primitive")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape._record(out, inputs, backward)
    else:
        out.requires_grad = False
        out._leaf = True
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    d0 = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != d0:
            raise ShapeError(f"mixed dtypes {d0} vs {t.dtype}")


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make_output(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make_output(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shaped tensors."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make_output(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make_output(x.data * s, (x,), lambda g: (g * s,))


def add_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make_output(x.data + s, (x,), lambda g: (g,))


def sum_all(x: Tensor) -> Tensor:
    """Sum over every element, returning a scalar (0-d) tensor."""
    shape, dtype = x.shape, x.dtype
    # Deterministic accumulation: pairwise summation over the row-major order.
    data = np.asarray(np.sum(x.data, dtype=dtype))
    return _make_output(data, (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-safe for large |x|
    out_data = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make_output(out_data, (x,), lambda g: (g * (out_data - out_data * out_data),))


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)
    return _make_output(out_data, (x,), lambda g: (g * (1.0 - out_data * out_data),))


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    alpha = float(alpha)
    xd = x.data
    out_data = np.where(xd > 0, xd, alpha * xd)

    def bwd(g):
        return (g * np.where(xd > 0, np.asarray(1.0, xd.dtype), np.asarray(alpha, xd.dtype)),)

    return _make_output(out_data, (x,), bwd)


def pointwise(x: Tensor, fn: str, alpha: float = 0.01) -> Tensor:
    """Apply a named elementwise nonlinearity: sigmoid | tanh | leaky_relu."""
    if fn == "sigmoid":
        return sigmoid(x)
    if fn == "tanh":
        return tanh(x)
    if fn == "leaky_relu":
        return leaky_relu(x, alpha)
    raise UsageError(f"unknown pointwise fn {fn!r}")


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _check_same_dtype(*tensors)
    rank = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != rank:
            raise ShapeError("concat: rank mismatch")
        for ax in range(rank):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat: shape mismatch {t.shape} vs {tensors[0].shape} on axis {ax}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    sl = [slice(None)] * rank

    def bwd(g):
        outs = []
        for i in range(len(sizes)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make_output(data, tuple(tensors), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis (a first)."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-d NCHW tensors")
    return concat((a, b), axis=1)


def slice_channels(x: Tensor, c0: int, c1: int) -> Tensor:
    """Channels [c0, c1) of an NCHW tensor; backward zero-pads back."""
    if x.data.ndim != 4:
        raise ShapeError("slice_channels expects a 4-d NCHW tensor")
    n, c, h, w = x.shape
    if not (0 <= c0 <= c1 <= c):
        raise ShapeError(f"slice_channels: [{c0},{c1}) out of range for C={c}")
    data = x.data[:, c0:c1]

    def bwd(g):
        full = np.zeros((n, c, h, w), dtype=g.dtype)
        full[:, c0:c1] = g
        return (full,)

    return _make_output(data, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded stride-1 cross-correlation of NCHW input with FCkk kernel.

    Output spatial dims equal input dims (zero padding, odd kernels only).
    Differentiable w.r.t. input, kernel and bias.  Internally lowered to a
    single GEMM over im2col patches; the patch matrix is cached for the
    kernel's backward rule.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    _check_same_dtype(x, kernel, *([bias] if bias is not None else []))
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N,C,H,W,kh,kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * kh * kw)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out2d = cols @ wmat.T
    if bias is not None:
        out2d += bias.data
    out_data = np.ascontiguousarray(out2d.reshape(n, h, w, f).transpose(0, 3, 1, 2))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, f)
        gx = gk = gb = None
        if x.requires_grad:
            dcols = g2d @ wmat  # (NHW, C*kh*kw)
            d6 = dcols.reshape(n, h, w, c, kh, kw)
            gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + h, j : j + w] += d6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + w].copy()
        if kernel.requires_grad:
            gk = (g2d.T @ cols).reshape(f, c, kh, kw)
        if bias is not None and bias.requires_grad:
            gb = g2d.sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make_output(out_data, inputs, bwd)


# ---------------------------------------------------------------------------
# pooling and upsampling


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route gradient to the first
    window position in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError("maxpool2 expects a 4-d NCHW tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = np.ascontiguousarray(
        x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1).astype(np.int8)  # argmax takes first on ties
    out_data = np.take_along_axis(windows, idx[..., None].astype(np.int64), axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None].astype(np.int64), g[..., None], axis=-1)
        gx = np.ascontiguousarray(
            gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        ).reshape(n, c, h, w)
        return (gx,)

    return _make_output(out_data, (x,), bwd)


_bilinear_cache: dict[tuple[int, str], np.ndarray] = {}


def _bilinear_matrix(n_in: int, dtype) -> np.ndarray:
    """Dense (2n, n) interpolation matrix for exact factor-2 upsampling.

    Output index o samples input coordinate (o + 0.5)/2 - 0.5, clamped to
    the valid range (half-pixel centers, no corner alignment).
    """
    key = (n_in, np.dtype(dtype).str)
    m = _bilinear_cache.get(key)
    if m is None:
        m = np.zeros((2 * n_in, n_in), dtype=dtype)
        for o in range(2 * n_in):
            s = (o + 0.5) / 2.0 - 0.5
            s = min(max(s, 0.0), float(n_in - 1))
            i0 = int(floor(s))
            i1 = min(i0 + 1, n_in - 1)
            t = s - i0
            m[o, i0] += 1.0 - t
            m[o, i1] += t
        _bilinear_cache[key] = m
    return m


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Bilinear upsampling by exactly 2x in both spatial dims."""
    if x.data.ndim != 4:
        raise ShapeError("upsample_bilinear2 expects a 4-d NCHW tensor")
    n, c, h, w = x.shape
    my = _bilinear_matrix(h, x.dtype)
    mx = _bilinear_matrix(w, x.dtype)
    out_data = my @ x.data @ mx.T  # broadcasts over (N, C)

    def bwd(g):
        return (my.T @ g @ mx,)

    return _make_output(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# softmax over channels


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-shifted for stability."""
    if x.data.ndim != 4:
        raise ShapeError("softmax_channels expects a 4-d NCHW tensor")
    if x.shape[1] < 2:
        raise ShapeError("softmax_channels needs at least 2 channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return (out_data * (g - dot),)

    return _make_output(out_data, (x,), bwd)


def log_softmax_channels(x: Tensor) -> Tensor:
    """log(softmax) over channels, computed without forming the ratio."""
    if x.data.ndim != 4:
        raise ShapeError("log_softmax_channels expects a 4-d NCHW tensor")
    if x.shape[1] < 2:
        raise ShapeError("log_softmax_channels needs at least 2 channels")
    m = x.data.max(axis=1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse

    def bwd(g):
        p = np.exp(out_data)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make_output(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization (fused primitive; train and eval modes)


def batch_norm_nchw(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    training: bool,
) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode normalizes with batch statistics and updates the running
    buffers in place as ``running <- (1 - momentum)*running + momentum*batch``.
    Eval mode is a pure affine map built from the running buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError("batch_norm expects a 4-d NCHW tensor")
    _check_same_dtype(x, gamma, beta)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm: gamma/beta must have shape (C,)")
    gshape = (1, c, 1, 1)
    gm = gamma.data.reshape(gshape)
    bt = beta.data.reshape(gshape)

    if training:
        count = n * h * w
        if count < 2:
            raise ShapeError("batch_norm train mode needs at least 2 elements per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * ivar
        out_data = gm * xhat + bt
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c).astype(running_var.dtype)

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                dxhat = g * gm
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (ivar / count) * (count * dxhat - s1 - xhat * s2)
            return (gx, dgamma, dbeta)

    else:
        rivar = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(gshape)
        rmean = running_mean.astype(x.dtype).reshape(gshape)
        xhat = (x.data - rmean) * rivar
        out_data = gm * xhat + bt

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = g * (gm * rivar) if x.requires_grad else None
            return (gx, dgamma, dbeta)

    return _make_output(out_data, (x, gamma, beta), bwd)
