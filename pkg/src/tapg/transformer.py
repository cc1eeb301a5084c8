"""Encoder/decoder transformer blocks built on :mod:`tapg.tensor`.

Positional encodings are added to the query and key inputs of every
attention (never to the values), and no attention is masked.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as tt
from .tensor import Module, ShapeError, Tensor


class QueryForm(str, Enum):
    """Where the first decoder layer takes its query sequence from."""

    LEARNABLE = "LearnableParameters"
    ENCODER_OUTPUT = "EncoderOutput"
    ORIGINAL_FEATURE = "OriginalFeature"


@dataclass
class TransformerConfig:
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_layers: int = 3
    query_form: QueryForm = QueryForm.ORIGINAL_FEATURE
    dropout_rate: float = 0.1
    use_pe: bool = True

    def __post_init__(self):
        self.query_form = QueryForm(self.query_form)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.use_pe and self.d_model % 2:
            raise ValueError("sine positional encoding needs an even d_model")


def sinusoidal_pe(T: int, d_model: int) -> np.ndarray:
    """Sine/cosine table of shape (T, d_model)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.empty((T, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(tt.get_default_dtype(), copy=False)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         return_weights: bool = False):
    """softmax(q k^T / sqrt(d)) v over the last two axes (leading axes are batch)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] \
            or q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scores = tt.scale(tt.matmul(q, tt.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = tt.softmax(scores, axis=-1)
    out = tt.matmul(weights, v)
    return (out, weights) if return_weights else out


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = tt.init_uniform(rng, (d_in, d_out), d_in)
        self.bias = tt.init_uniform(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tt.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.shift = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tt.layer_norm(x, self.gain, self.shift, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, d = x.shape
        h = self.n_heads
        return tt.transpose(tt.reshape(x, (n, h, d // h)), (1, 0, 2))

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                 pe_q: Tensor | None = None, pe_k: Tensor | None = None) -> Tensor:
        if q_in.shape[-1] != self.q_proj.weight.shape[0] or k_in.shape != v_in.shape:
            raise ShapeError(f"multi-head attention: q {q_in.shape}, k {k_in.shape}, v {v_in.shape}")
        if pe_q is not None:
            q_in = q_in + pe_q
        if pe_k is not None:
            k_in = k_in + pe_k
        q = self._split(self.q_proj(q_in))
        k = self._split(self.k_proj(k_in))
        v = self._split(self.v_proj(v_in))
        heads = scaled_dot_attention(q, k, v)
        n = heads.shape[1]
        merged = tt.reshape(tt.transpose(heads, (1, 0, 2)), (n, -1))
        return self.out_proj(merged)


class FeedForward(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.fc1 = Linear(cfg.d_model, cfg.d_ff, rng)
        self.fc2 = Linear(cfg.d_ff, cfg.d_model, rng)

    def __call__(self, x: Tensor, rng=None, rate: float = 0.0) -> Tensor:
        return self.fc2(tt.dropout(tt.relu(self.fc1(x)), rate, rng))


@functools.lru_cache(maxsize=64)
def _pe_table(n: int, d_model: int, dtype) -> Tensor:
    return Tensor(sinusoidal_pe(n, d_model), dtype=dtype)


def _pe(n: int, cfg: TransformerConfig) -> Tensor | None:
    return _pe_table(n, cfg.d_model, tt.get_default_dtype()) if cfg.use_pe else None


class EncoderLayer(Module):
    """Self-attention then feed-forward, each wrapped in residual + layer norm."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg, rng)
        self.norm2 = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        p = self.cfg.dropout_rate
        pe = _pe(x.shape[0], self.cfg)
        x = self.norm1(x + tt.dropout(self.attn(x, x, x, pe, pe), p, rng))
        return self.norm2(x + tt.dropout(self.ffn(x, rng, p), p, rng))


class DecoderLayer(Module):
    """Self-attention over the query source, cross-attention into the encoder
    output, then feed-forward; residual + layer norm around each."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg, rng)
        self.norm3 = LayerNorm(cfg.d_model)

    def __call__(self, source: Tensor, memory: Tensor,
                 rng: np.random.Generator | None = None) -> Tensor:
        p = self.cfg.dropout_rate
        pe_q = _pe(source.shape[0], self.cfg)
        pe_k = _pe(memory.shape[0], self.cfg)
        fq = self.norm1(source + tt.dropout(self.self_attn(source, source, source, pe_q, pe_q), p, rng))
        x = self.norm2(fq + tt.dropout(self.cross_attn(fq, memory, memory, pe_q, pe_k), p, rng))
        return self.norm3(x + tt.dropout(self.ffn(x, rng, p), p, rng))


class EncoderDecoder(Module):
    """M encoder layers followed by M decoder layers.

    ``seq_len`` is required only for the learnable-query form, whose query
    bank has a fixed length.
    """

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator,
                 seq_len: int | None = None):
        self.cfg = cfg
        self.encoders = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.decoders = [DecoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.query_bank = None
        if cfg.query_form is QueryForm.LEARNABLE:
            if seq_len is None:
                raise ValueError("learnable queries need a fixed seq_len")
            self.query_bank = tt.init_uniform(rng, (seq_len, cfg.d_model), cfg.d_model)

    def encode(self, x: Tensor, rng=None) -> Tensor:
        for layer in self.encoders:
            x = layer(x, rng)
        return x

    def query_source(self, x: Tensor, memory: Tensor) -> Tensor:
        form = self.cfg.query_form
        if form is QueryForm.ORIGINAL_FEATURE:
            return x
        if form is QueryForm.ENCODER_OUTPUT:
            return memory
        if self.query_bank.shape[0] != x.shape[0]:
            raise ShapeError(f"learnable query bank has length {self.query_bank.shape[0]}, "
                             f"input sequence has length {x.shape[0]}")
        return self.query_bank

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        memory = self.encode(x, rng)
        y = self.query_source(x, memory)
        for layer in self.decoders:
            y = layer(y, memory, rng)
        return y


# -- checkpoint file ------------------------------------------------------------

CHECKPOINT_MAGIC = b"TAPG"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian f64 in the TAPG binary layout."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out
