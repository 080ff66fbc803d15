"""Network building blocks: convolutional LSTM cell, conv blocks, batch norm.

The recurrent cell is the standard convolutional LSTM without peephole
connections: the four gates are convolutions of the input and of the
previous hidden state.  Internally the eight gate kernels are fused into
one convolution over the concatenated ``[x; h]`` channels so each step
costs a single GEMM; the parameters stay separate named tensors so
checkpoints and the optimizer see the conventional layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    """Fan-in-scaled uniform noise, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ClstmParams:
    """Gate kernels/biases of one convolutional LSTM layer.

    Kernels have shape (out_ch, in_ch, k, k) for the input path and
    (out_ch, out_ch, k, k) for the hidden path.  The forget bias is
    initialized to 1.0; all other biases start at zero.
    """

    w_xi: Tensor
    w_hi: Tensor
    w_xf: Tensor
    w_hf: Tensor
    w_xo: Tensor
    w_ho: Tensor
    w_xg: Tensor
    w_hg: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @property
    def out_channels(self) -> int:
        return self.w_xi.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w_xi.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.w_xi.shape[2]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}/{n}": getattr(self, n)
            for n in ("w_xi", "w_hi", "w_xf", "w_hf", "w_xo", "w_ho", "w_xg", "w_hg",
                      "b_i", "b_f", "b_o", "b_g")
        }


@dataclass
class ClstmState:
    """Hidden/memory pair carried across time; h is tanh-bounded."""

    h: Tensor
    c: Tensor


def init_clstm(in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
               dtype=np.float32) -> ClstmParams:
    fan_x = in_ch * kernel * kernel
    fan_h = out_ch * kernel * kernel

    def wx():
        return Tensor(uniform_init(rng, (out_ch, in_ch, kernel, kernel), fan_x, dtype),
                      requires_grad=True)

    def wh():
        return Tensor(uniform_init(rng, (out_ch, out_ch, kernel, kernel), fan_h, dtype),
                      requires_grad=True)

    def b(value):
        return Tensor(np.full(out_ch, value, dtype=dtype), requires_grad=True)

    return ClstmParams(
        w_xi=wx(), w_hi=wh(), w_xf=wx(), w_hf=wh(),
        w_xo=wx(), w_ho=wh(), w_xg=wx(), w_hg=wh(),
        b_i=b(0.0), b_f=b(1.0), b_o=b(0.0), b_g=b(0.0),
    )


def clstm_zero_state(out_ch: int, n: int, h: int, w: int, dtype=np.float32) -> ClstmState:
    if min(out_ch, n, h, w) <= 0:
        raise ShapeError("clstm_zero_state: dims must be positive")
    return ClstmState(
        h=Tensor(np.zeros((n, out_ch, h, w), dtype=dtype)),
        c=Tensor(np.zeros((n, out_ch, h, w), dtype=dtype)),
    )


def clstm_step(params: ClstmParams, x: Tensor, prev: ClstmState) -> ClstmState:
    """One convolutional LSTM update.

    i = sigmoid(w_xi*x + w_hi*h + b_i)      f = sigmoid(... + b_f)
    o = sigmoid(... + b_o)                  g = tanh(... + b_g)
    c' = f (.) c + i (.) g                  h' = o (.) tanh(c')
    """
    n, _, hh, ww = x.shape
    f_out = params.out_channels
    if prev.h.shape != (n, f_out, hh, ww) or prev.c.shape != prev.h.shape:
        raise ShapeError(
            f"clstm_step: state shape {prev.h.shape} does not match input {(n, f_out, hh, ww)}")
    # One fused convolution over [x; h] with the gate kernels stacked along
    # the output axis: order (i, f, o, g).
    xs = T.concat_channels(x, prev.h)
    w_i = T.concat((params.w_xi, params.w_hi), axis=1)
    w_f = T.concat((params.w_xf, params.w_hf), axis=1)
    w_o = T.concat((params.w_xo, params.w_ho), axis=1)
    w_g = T.concat((params.w_xg, params.w_hg), axis=1)
    w_all = T.concat((w_i, w_f, w_o, w_g), axis=0)
    b_all = T.concat((params.b_i, params.b_f, params.b_o, params.b_g), axis=0)
    pre = T.conv2d(xs, w_all, b_all)
    i = T.sigmoid(T.slice_channels(pre, 0, f_out))
    f = T.sigmoid(T.slice_channels(pre, f_out, 2 * f_out))
    o = T.sigmoid(T.slice_channels(pre, 2 * f_out, 3 * f_out))
    g = T.tanh(T.slice_channels(pre, 3 * f_out, 4 * f_out))
    c_new = T.add(T.mul(f, prev.c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return ClstmState(h=h_new, c=c_new)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/gamma": self.gamma, f"{prefix}/beta": self.beta}

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}/running_mean": self.running_mean,
                f"{prefix}/running_var": self.running_var}


def init_batch_norm(channels: int, momentum: float = 0.1, eps: float = 1e-5,
                    dtype=np.float32) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(channels, dtype=np.float64),
        running_var=np.ones(channels, dtype=np.float64),
        momentum=momentum,
        eps=eps,
    )


def batch_norm(x: Tensor, params: BatchNormParams, mode: str = "train") -> Tensor:
    """Normalize per channel over (N, H, W).

    ``mode="train"`` uses batch statistics and advances the running
    buffers; ``mode="eval"`` is a pure function of the running buffers.
    """
    if mode not in ("train", "eval"):
        raise T.UsageError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    return T.batch_norm_nchw(
        x, params.gamma, params.beta,
        params.running_mean, params.running_var,
        params.momentum, params.eps, training=(mode == "train"),
    )


@dataclass
class ConvBlockParams:
    """Convolution + batch norm (+ leaky ReLU applied by conv_block)."""

    w: Tensor
    b: Tensor
    bn: BatchNormParams

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}/w": self.w, f"{prefix}/b": self.b}
        out.update(self.bn.named(f"{prefix}/bn"))
        return out

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return self.bn.buffers(f"{prefix}/bn")


def init_conv_block(in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                    momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32) -> ConvBlockParams:
    fan_in = in_ch * kernel * kernel
    return ConvBlockParams(
        w=Tensor(uniform_init(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype),
                 requires_grad=True),
        b=Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True),
        bn=init_batch_norm(out_ch, momentum, eps, dtype),
    )


def conv_block(x: Tensor, params: ConvBlockParams, mode: str = "train",
               slope: float = 0.01) -> Tensor:
    """conv2d -> batch_norm -> leaky_relu, in that order."""
    y = T.conv2d(x, params.w, params.b)
    y = batch_norm(y, params.bn, mode)
    return T.leaky_relu(y, slope)
