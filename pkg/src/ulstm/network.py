"""The recurrent U-shaped segmentation network and its three variants.

An encoder pyramid of ``levels`` blocks feeds a mirrored decoder through
skip connections.  Each encoder block is [recurrent cell -> leaky ReLU ->
conv -> BN -> leaky ReLU]; pooling follows every level except the deepest
(the bottleneck).  Each decoder block upsamples, concatenates the matching
encoder output and applies two conv-BN-leakyReLU stages.  The variant
decides where the recurrent cells sit:

* ``enclstm``  - first stage of every encoder block is a conv LSTM,
* ``declstm``  - first stage of every decoder block is a conv LSTM
                 (the encoder's first stage degrades to a plain conv),
* ``fulllstm`` - both.

A final 1x1 convolution maps to per-pixel class logits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .layers import (
    BatchNormParams,
    ClstmParams,
    ClstmState,
    ConvBlockParams,
    batch_norm,
    clstm_step,
    clstm_zero_state,
    conv_block,
    init_batch_norm,
    init_clstm,
    init_conv_block,
    uniform_init,
)
from .tensor import ShapeError, Tensor, UsageError

VARIANTS = ("enclstm", "declstm", "fulllstm")


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 4
    conv_depths: tuple = (128, 256, 512, 1024)
    clstm_kernel: int = 3
    variant: str = "enclstm"
    width_multiplier: float = 1.0
    num_classes: int = 2
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if len(self.conv_depths) != self.levels:
            raise ValueError("conv_depths length must equal levels")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def channels(self) -> tuple:
        return tuple(max(1, round(d * self.width_multiplier)) for d in self.conv_depths)

    def kernel_at(self, level: int) -> int:
        if isinstance(self.clstm_kernel, (tuple, list)):
            return int(self.clstm_kernel[level])
        return int(self.clstm_kernel)

    @property
    def enc_recurrent(self) -> bool:
        return self.variant in ("enclstm", "fulllstm")

    @property
    def dec_recurrent(self) -> bool:
        return self.variant in ("declstm", "fulllstm")

    def check_input_size(self, h: int, w: int) -> None:
        d = self.spatial_divisor
        if h % d or w % d:
            raise ShapeError(
                f"input size {h}x{w} is invalid: spatial dims must be multiples of {d} "
                f"to survive the {self.levels - 1} pooling stages")

    def to_json(self) -> str:
        d = {
            "levels": self.levels,
            "conv_depths": list(self.conv_depths),
            "clstm_kernel": list(self.clstm_kernel)
            if isinstance(self.clstm_kernel, (tuple, list)) else self.clstm_kernel,
            "variant": self.variant,
            "width_multiplier": self.width_multiplier,
            "num_classes": self.num_classes,
            "leaky_slope": self.leaky_slope,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "NetworkConfig":
        d = json.loads(text)
        d["conv_depths"] = tuple(d["conv_depths"])
        if isinstance(d["clstm_kernel"], list):
            d["clstm_kernel"] = tuple(d["clstm_kernel"])
        return NetworkConfig(**d)

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass
class EncoderLevelParams:
    clstm: Optional[ClstmParams]  # recurrent first stage
    first_w: Optional[Tensor]     # plain-conv first stage (declstm encoder)
    first_b: Optional[Tensor]
    conv: ConvBlockParams

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.clstm is not None:
            out.update(self.clstm.named(f"{prefix}/clstm"))
        else:
            out[f"{prefix}/first/w"] = self.first_w
            out[f"{prefix}/first/b"] = self.first_b
        out.update(self.conv.named(f"{prefix}/conv"))
        return out

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return self.conv.buffers(f"{prefix}/conv")


@dataclass
class DecoderLevelParams:
    clstm: Optional[ClstmParams]         # recurrent first stage
    first_bn: Optional[BatchNormParams]  # BN applied to the recurrent output
    first: Optional[ConvBlockParams]     # plain first stage
    second: ConvBlockParams

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.clstm is not None:
            out.update(self.clstm.named(f"{prefix}/clstm"))
            out.update(self.first_bn.named(f"{prefix}/first_bn"))
        else:
            out.update(self.first.named(f"{prefix}/first"))
        out.update(self.second.named(f"{prefix}/second"))
        return out

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.clstm is not None:
            out.update(self.first_bn.buffers(f"{prefix}/first_bn"))
        else:
            out.update(self.first.buffers(f"{prefix}/first"))
        out.update(self.second.buffers(f"{prefix}/second"))
        return out


@dataclass
class NetworkParams:
    """Every learnable tensor and running buffer, plus flat name lookups."""

    config: NetworkConfig
    enc: list
    dec: list
    final_w: Tensor
    final_b: Tensor
    named: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def rebuild_index(self) -> None:
        named: dict[str, Tensor] = {}
        buffers: dict[str, np.ndarray] = {}
        for l, lvl in enumerate(self.enc):
            named.update(lvl.named(f"enc{l}"))
            buffers.update(lvl.buffers(f"enc{l}"))
        for l, lvl in enumerate(self.dec):
            named.update(lvl.named(f"dec{l}"))
            buffers.update(lvl.buffers(f"dec{l}"))
        named["final/w"] = self.final_w
        named["final/b"] = self.final_b
        self.named = named
        self.buffers = buffers

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named.values())

    @property
    def dtype(self):
        return self.final_w.dtype


def init_network(config: NetworkConfig, seed: int, dtype=np.float32) -> NetworkParams:
    """Fresh parameters drawn from the run seed (order-stable)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    ch = config.channels()
    mom, eps = config.bn_momentum, config.bn_eps
    enc = []
    for l in range(config.levels):
        in_ch = 1 if l == 0 else ch[l - 1]
        k = config.kernel_at(l)
        if config.enc_recurrent:
            clstm, fw, fb = init_clstm(in_ch, ch[l], k, rng, dtype), None, None
        else:
            clstm = None
            fw = Tensor(uniform_init(rng, (ch[l], in_ch, k, k), in_ch * k * k, dtype),
                        requires_grad=True)
            fb = Tensor(np.zeros(ch[l], dtype=dtype), requires_grad=True)
        conv = init_conv_block(ch[l], ch[l], 3, rng, mom, eps, dtype)
        enc.append(EncoderLevelParams(clstm, fw, fb, conv))
    dec = []
    for l in range(config.levels - 1):
        cat_ch = ch[l + 1] + ch[l]
        k = config.kernel_at(l)
        if config.dec_recurrent:
            clstm = init_clstm(cat_ch, ch[l], k, rng, dtype)
            first_bn = init_batch_norm(ch[l], mom, eps, dtype)
            first = None
        else:
            clstm, first_bn = None, None
            first = init_conv_block(cat_ch, ch[l], 3, rng, mom, eps, dtype)
        second = init_conv_block(ch[l], ch[l], 3, rng, mom, eps, dtype)
        dec.append(DecoderLevelParams(clstm, first_bn, first, second))
    final_w = Tensor(uniform_init(rng, (config.num_classes, ch[0], 1, 1), ch[0], dtype),
                     requires_grad=True)
    final_b = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True)
    params = NetworkParams(config, enc, dec, final_w, final_b)
    params.rebuild_index()
    return params


def clone_params(params: NetworkParams) -> NetworkParams:
    """Deep copy (fresh arrays, same values/config)."""
    out = init_network(params.config, seed=0, dtype=params.dtype)
    for name, t in out.named.items():
        t.data[...] = params.named[name].data
    for name, b in out.buffers.items():
        b[...] = params.buffers[name]
    return out


def zero_recurrent(params: NetworkParams) -> NetworkParams:
    """Copy of the parameters with every hidden-path gate kernel zeroed.

    Together with per-frame state resets this makes the network a pure
    frame-by-frame function (the temporal-memory ablation).
    """
    out = clone_params(params)
    for name, t in out.named.items():
        leaf = name.rsplit("/", 1)[-1]
        if leaf in ("w_hi", "w_hf", "w_ho", "w_hg"):
            t.data[...] = 0.0
    return out


@dataclass
class NetworkState:
    """Per-recurrent-layer (h, c) pairs, encoder levels then decoder levels."""

    enc: list
    dec: list

    def detach(self) -> "NetworkState":
        def d(s):
            return None if s is None else ClstmState(h=s.h.detach(), c=s.c.detach())

        return NetworkState(enc=[d(s) for s in self.enc], dec=[d(s) for s in self.dec])


def zero_state(config: NetworkConfig, n: int, h: int, w: int, dtype=np.float32) -> NetworkState:
    config.check_input_size(h, w)
    ch = config.channels()
    enc = [
        clstm_zero_state(ch[l], n, h >> l, w >> l, dtype) if config.enc_recurrent else None
        for l in range(config.levels)
    ]
    dec = [
        clstm_zero_state(ch[l], n, h >> l, w >> l, dtype) if config.dec_recurrent else None
        for l in range(config.levels - 1)
    ]
    return NetworkState(enc=enc, dec=dec)


def encoder_apply(level: int, x: Tensor, prev: Optional[ClstmState],
                  params: NetworkParams, mode: str = "train"):
    """One encoder block: returns (block output, new state, pooled output).

    ``pooled`` is None at the deepest level (the bottleneck is not pooled);
    ``new state`` is None when the encoder first stage is a plain conv.
    """
    cfg = params.config
    lvl = params.enc[level]
    slope = cfg.leaky_slope
    if lvl.clstm is not None:
        st = clstm_step(lvl.clstm, x, prev)
        a = T.leaky_relu(st.h, slope)
    else:
        st = None
        a = T.leaky_relu(T.conv2d(x, lvl.first_w, lvl.first_b), slope)
    h = conv_block(a, lvl.conv, mode, slope)
    pooled = T.maxpool2(h) if level < cfg.levels - 1 else None
    return h, st, pooled


def decoder_apply(level: int, y: Tensor, skip: Tensor, prev: Optional[ClstmState],
                  params: NetworkParams, mode: str = "train"):
    """One decoder block: upsample, concat skip, two conv stages.

    Returns (block output, new state); state is None for the plain variant.
    """
    cfg = params.config
    lvl = params.dec[level]
    slope = cfg.leaky_slope
    up = T.upsample_bilinear2(y)
    if up.shape[2:] != skip.shape[2:] or up.shape[0] != skip.shape[0]:
        raise ShapeError(
            f"decoder_apply: upsampled {up.shape} does not align with skip {skip.shape}")
    cat = T.concat_channels(up, skip)
    if lvl.clstm is not None:
        st = clstm_step(lvl.clstm, cat, prev)
        a = T.leaky_relu(batch_norm(st.h, lvl.first_bn, mode), slope)
    else:
        st = None
        a = conv_block(cat, lvl.first, mode, slope)
    z = conv_block(a, lvl.second, mode, slope)
    return z, st


def forward_frame(frame: Tensor, state: NetworkState, params: NetworkParams,
                  mode: str = "train"):
    """Run one frame through the full network.

    Returns per-pixel class logits of shape (N, num_classes, H, W) and the
    advanced recurrent state.
    """
    cfg = params.config
    if frame.data.ndim != 4 or frame.shape[1] != 1:
        raise ShapeError(f"forward_frame expects (N,1,H,W), got {frame.shape}")
    n, _, h, w = frame.shape
    cfg.check_input_size(h, w)
    if len(state.enc) != cfg.levels or len(state.dec) != cfg.levels - 1:
        raise UsageError("state does not match network depth")
    if cfg.enc_recurrent and any(s is None for s in state.enc):
        raise UsageError("missing encoder state for a recurrent variant")
    if cfg.dec_recurrent and any(s is None for s in state.dec):
        raise UsageError("missing decoder state for a recurrent variant")

    skips = []
    new_enc = []
    x = frame
    for l in range(cfg.levels):
        h_out, st, pooled = encoder_apply(l, x, state.enc[l], params, mode)
        skips.append(h_out)
        new_enc.append(st)
        if pooled is not None:
            x = pooled
    y = skips[-1]
    new_dec: list = [None] * (cfg.levels - 1)
    for l in range(cfg.levels - 2, -1, -1):
        y, st = decoder_apply(l, y, skips[l], state.dec[l], params, mode)
        new_dec[l] = st
    logits = T.conv2d(y, params.final_w, params.final_b)
    return logits, NetworkState(enc=new_enc, dec=new_dec)


def iter_frames(frames, params: NetworkParams, mode: str = "eval",
                stateless: bool = False) -> Iterator[np.ndarray]:
    """Stream logits frame by frame in constant memory.

    ``frames`` is any iterable of (N, 1, H, W) arrays (or a (T, N, 1, H, W)
    array).  With ``stateless=True`` the recurrent state is reset to zero
    before every frame, which makes the output frame-independent.
    """
    state = None
    for fd in frames:
        arr = fd.data if isinstance(fd, Tensor) else np.asarray(fd, dtype=np.float32)
        if state is None or stateless:
            n, _, h, w = arr.shape
            state = zero_state(params.config, n, h, w, params.dtype)
        logits, state = forward_frame(Tensor(arr), state, params, mode)
        yield logits.data


def forward_sequence(frames, params: NetworkParams, mode: str = "eval",
                     stateless: bool = False) -> Tensor:
    """Run a whole (T, N, 1, H, W) sequence from the zero state.

    Convenience wrapper over `iter_frames` that stacks the per-frame
    logits; intended for inference (the training loop drives
    `forward_frame` itself so gradients can flow through the window).
    """
    out = [d for d in iter_frames(frames, params, mode, stateless)]
    if not out:
        raise UsageError("forward_sequence needs at least one frame")
    return Tensor(np.stack(out, axis=0))


def predict_probabilities(logits) -> Tensor:
    """Per-pixel class probabilities (softmax over channels)."""
    t = logits if isinstance(logits, Tensor) else Tensor(logits)
    return T.softmax_channels(t)


def segment(probabilities, connectivity: int = 4) -> np.ndarray:
    """Argmax the class probabilities and label foreground components.

    Accepts (C, H, W) or (N, C, H, W); returns an int32 instance map of
    shape (H, W) or (N, H, W) where 0 is background and each connected
    foreground component gets a unique positive label.
    """
    from .metrics import connected_components

    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    if p.ndim == 3:
        fg = p.argmax(axis=0) > 0
        return connected_components(fg, connectivity)
    if p.ndim == 4:
        fg = p.argmax(axis=1) > 0
        return np.stack([connected_components(fg[i], connectivity) for i in range(p.shape[0])])
    raise ShapeError(f"segment expects 3-d or 4-d probabilities, got {p.shape}")
