"""Encoder, factorized translator and mirrored decoder for single-pass frame prediction."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    T_in: int = 10
    T_out: int = 10
    C: int = 1
    H: int = 64
    W: int = 64
    stages: int = 3
    base_channels: int = 8
    n_blocks: int = 2
    # None, or equal to the flattened latent size, means identity embedding
    embed_width: int | None = 256

    def __post_init__(self):
        div = 2 ** self.stages
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.H % div or self.W % div:
            raise ValueError(f"H and W must be divisible by 2**stages = {div}")
        if self.T_in < 1 or self.T_out < 1:
            raise ValueError("T_in and T_out must be >= 1")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.C < 1 or self.base_channels < 1:
            raise ValueError("C and base_channels must be >= 1")
        if self.embed_width is not None and self.embed_width < 1:
            raise ValueError("embed_width must be >= 1")

    @property
    def latent_shape(self):
        """(C', H', W') after the encoder."""
        s = 2 ** self.stages
        return (self.base_channels * 2 ** (self.stages - 1), self.H // s, self.W // s)

    @property
    def F(self):
        c, h, w = self.latent_shape
        return c * h * w

    @property
    def identity_embedding(self):
        return self.embed_width is None or self.embed_width == self.F

    @property
    def M(self):
        return self.F if self.identity_embedding else self.embed_width

    def encoder_channels(self):
        return [self.base_channels * 2 ** i for i in range(self.stages)]

    def decoder_channels(self):
        """(in, out) channel pairs of the upsampling stages."""
        enc = self.encoder_channels()
        pairs = []
        for j in range(self.stages):
            cin = enc[self.stages - 1 - j]
            cout = enc[max(self.stages - 2 - j, 0)]
            pairs.append((cin, cout))
        return pairs

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ConvWeights:
    kernel: Tensor
    bias: Tensor


@dataclass
class LGUWeights:
    w_k: Tensor
    w_v: Tensor
    w_r: Tensor
    w_o: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.w_k, self.w_v, self.w_r, self.w_o)}
        if len(shapes) != 1:
            raise nx.ShapeError(f"LGU projections disagree in shape: {shapes}")


@dataclass
class EVABlockWeights:
    ln_time_gain: Tensor
    ln_time_offset: Tensor
    lgu_time: LGUWeights
    ln_space_gain: Tensor
    ln_space_offset: Tensor
    lgu_space: LGUWeights


@dataclass
class ModelWeights:
    cfg: ModelConfig
    encoder: list[ConvWeights]
    w_in: Tensor | None
    w_out: Tensor | None
    blocks: list[EVABlockWeights]
    w_t: Tensor
    decoder: list[ConvWeights]
    head: ConvWeights
    extra: dict = field(default_factory=dict)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, cw in enumerate(self.encoder):
            yield f"encoder.{i}.kernel", cw.kernel
            yield f"encoder.{i}.bias", cw.bias
        if self.w_in is not None:
            yield "tokenizer.w_in", self.w_in
            yield "tokenizer.w_out", self.w_out
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}"
            yield f"{p}.ln_time.gain", blk.ln_time_gain
            yield f"{p}.ln_time.offset", blk.ln_time_offset
            for nm in ("w_k", "w_v", "w_r", "w_o"):
                yield f"{p}.lgu_time.{nm}", getattr(blk.lgu_time, nm)
            yield f"{p}.ln_space.gain", blk.ln_space_gain
            yield f"{p}.ln_space.offset", blk.ln_space_offset
            for nm in ("w_k", "w_v", "w_r", "w_o"):
                yield f"{p}.lgu_space.{nm}", getattr(blk.lgu_space, nm)
        yield "head.w_t", self.w_t
        for i, cw in enumerate(self.decoder):
            yield f"decoder.{i}.kernel", cw.kernel
            yield f"decoder.{i}.bias", cw.bias
        yield "decoder.out.kernel", self.head.kernel
        yield "decoder.out.bias", self.head.bias

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state_dict(self):
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unknown = set(state) - set(own)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise nx.ShapeError(f"{name}: expected {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def astype(self, dtype):
        for t in self.parameters():
            t.data = t.data.astype(dtype)
        return self


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    """Deterministic init: uniform(+-sqrt(1/fan_in)) for linear and conv weights."""
    rng = np.random.default_rng(seed)

    def uni(shape, fan_in):
        b = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-b, b, size=shape).astype(dtype), requires_grad=True)

    def conv(cin, cout):
        return ConvWeights(uni((cout, cin, 3, 3), cin * 9), uni((cout,), cin * 9))

    def lgu(n):
        return LGUWeights(*(uni((n, n), n) for _ in range(4)))

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    enc_ch = cfg.encoder_channels()
    encoder = [conv(cin, cout) for cin, cout in zip([cfg.C] + enc_ch[:-1], enc_ch)]
    if cfg.identity_embedding:
        w_in = w_out = None
    else:
        w_in = uni((cfg.F, cfg.M), cfg.F)
        w_out = uni((cfg.M, cfg.F), cfg.M)
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(EVABlockWeights(
            ones(cfg.M), zeros(cfg.M), lgu(cfg.M),
            ones(cfg.T_in), zeros(cfg.T_in), lgu(cfg.T_in),
        ))
    w_t = Tensor(np.full((cfg.T_in, cfg.T_out), 1.0 / cfg.T_in, dtype=dtype), requires_grad=True)
    decoder = [conv(cin, cout) for cin, cout in cfg.decoder_channels()]
    head = conv(cfg.base_channels, cfg.C)
    return ModelWeights(cfg, encoder, w_in, w_out, blocks, w_t, decoder, head)


# ---------------------------------------------------------------- pipeline stages

def _check_frames(frames: Tensor, cfg: ModelConfig, T=None):
    shape = frames.shape
    if len(shape) != 5 or shape[2:] != (cfg.C, cfg.H, cfg.W):
        raise nx.ShapeError(f"frames {shape} do not match geometry (B, T, {cfg.C}, {cfg.H}, {cfg.W})")
    if T is not None and shape[1] != T:
        raise nx.ShapeError(f"expected {T} frames, got {shape[1]}")


def encode(frames: Tensor, w: ModelWeights) -> Tensor:
    cfg = w.cfg
    _check_frames(frames, cfg)
    b, t = frames.shape[:2]
    x = nx.reshape(frames, (b * t, cfg.C, cfg.H, cfg.W))
    for cw in w.encoder:
        x = nx.mish(nx.conv2d(x, cw.kernel, cw.bias, stride=2))
    return nx.reshape(x, (b, t) + x.shape[1:])


def tokenize(latents: Tensor, w: ModelWeights) -> Tensor:
    b, t = latents.shape[:2]
    e = nx.reshape(latents, (b, t, w.cfg.F))
    if w.w_in is not None:
        e = nx.linear(e, w.w_in)
    return e


def untokenize(e: Tensor, w: ModelWeights) -> Tensor:
    b, t = e.shape[:2]
    if w.w_out is not None:
        e = nx.linear(e, w.w_out)
    return nx.reshape(e, (b, t) + w.cfg.latent_shape)


def lgu(u: Tensor, p: LGUWeights) -> Tensor:
    """Gated unit: ``(sigmoid(uW_R) * (mish(uW_K) * uW_V)) W_O`` with no cross-position term."""
    k = nx.mish(nx.linear(u, p.w_k))
    v = nx.linear(u, p.w_v)
    r = nx.sigmoid(nx.linear(u, p.w_r))
    return nx.linear(nx.hadamard(r, nx.hadamard(k, v)), p.w_o)


def time_mix(e: Tensor, blk: EVABlockWeights) -> Tensor:
    h = nx.layer_norm(e, blk.ln_time_gain, blk.ln_time_offset)
    return nx.add(e, lgu(nx.time_shift(h), blk.lgu_time))


def space_mix(e: Tensor, blk: EVABlockWeights) -> Tensor:
    et = nx.transpose_axes(e)
    h = nx.layer_norm(et, blk.ln_space_gain, blk.ln_space_offset)
    return nx.add(e, nx.transpose_axes(lgu(h, blk.lgu_space)))


def eva_block(e: Tensor, blk: EVABlockWeights) -> Tensor:
    return space_mix(time_mix(e, blk), blk)


def translate(e: Tensor, w: ModelWeights) -> Tensor:
    for blk in w.blocks:
        e = eva_block(e, blk)
    return temporal_head(e, w.w_t)


def temporal_head(e: Tensor, w_t: Tensor) -> Tensor:
    """Map (B, T_in, M) to (B, T_out, M) with a linear map over the time axis."""
    return nx.transpose_axes(nx.linear(nx.transpose_axes(e), w_t))


def decode(e: Tensor, w: ModelWeights) -> Tensor:
    cfg = w.cfg
    b, t = e.shape[:2]
    x = untokenize(e, w)
    x = nx.reshape(x, (b * t,) + cfg.latent_shape)
    for cw in w.decoder:
        x = nx.mish(nx.conv2d(nx.nearest_upsample2x(x), cw.kernel, cw.bias, stride=1))
    x = nx.conv2d(x, w.head.kernel, w.head.bias, stride=1)
    return nx.reshape(x, (b, t, cfg.C, cfg.H, cfg.W))


def predict(frames_in: Tensor, w: ModelWeights) -> Tensor:
    """Generate all ``T_out`` future frames in one forward pass."""
    _check_frames(frames_in, w.cfg, T=w.cfg.T_in)
    return decode(translate(tokenize(encode(frames_in, w), w), w), w)


def predict_array(frames_in: np.ndarray, w: ModelWeights, clamp=True) -> np.ndarray:
    """Inference helper on plain arrays; clamps to [0, 1] for evaluation."""
    with nx.no_tape():
        out = predict(Tensor(np.asarray(frames_in, dtype=w.w_t.dtype)), w).data
    return np.clip(out, 0.0, 1.0) if clamp else out


# ---------------------------------------------------------------- benchmark baseline

def naive_joint_attention(x: np.ndarray, wq, wk, wv, chunk=1024) -> np.ndarray:
    """Single-head softmax attention over all ``L`` tokens of ``x`` (L, d).

    Quadratic-cost benchmark reference only; rows are processed in chunks so the
    L x L logits never sit in memory at once.
    """
    q, k, v = x @ wq, x @ wk, x @ wv
    scale = 1.0 / np.sqrt(q.shape[-1])
    out = np.empty_like(v)
    for s in range(0, x.shape[0], chunk):
        logits = (q[s : s + chunk] @ k.T) * scale
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        out[s : s + chunk] = p @ v
    return out
