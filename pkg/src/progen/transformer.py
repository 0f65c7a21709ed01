"""Encoder/decoder stacks with memory-augmented self-attention and meshed cross-attention.

With ``memory_slots=0`` and ``mesh=False`` the stacks reduce to the plain
post-norm transformer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DataError, ShapeError
from .layers import Dropout, Embedding, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class TransformerConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    memory_slots: int = 8
    mesh: bool = True
    dropout: float = 0.1
    max_len: int = 128

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "max_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for sinusoidal positions, got {self.d_model}")
        if self.memory_slots < 0:
            raise ConfigError(f"memory_slots must be >= 0, got {self.memory_slots}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self):
        return asdict(self)


def positional_encoding(max_len, d_model):
    """Sinusoidal table: sin on even columns, cos on odd columns."""
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even width, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def attention_mask(key_keep=None, n_queries=None, causal=False):
    """Combine a key padding mask (B, Tk) and/or a causal pattern into (B|1, Tq|1, Tk)."""
    mask = None
    if key_keep is not None:
        mask = np.asarray(key_keep, dtype=bool)[:, None, :]
    if causal:
        c = causal_mask(n_queries)[None]
        mask = c if mask is None else (mask & c)
    return mask


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``n_heads`` heads.

    When ``memory_slots > 0`` two learned (m, d_model) matrices are appended to
    the projected keys and values of every example; those columns are never
    masked.
    """

    def __init__(self, d_model, n_heads, rng, memory_slots=0, dropout=0.0):
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads, self.memory_slots = d_model, n_heads, memory_slots
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        if memory_slots:
            std = d_model ** -0.5
            self.memory_k = Tensor(rng.normal(0.0, std, size=(memory_slots, d_model)), requires_grad=True)
            self.memory_v = Tensor(rng.normal(0.0, std, size=(memory_slots, d_model)), requires_grad=True)
        self.drop = Dropout(dropout, rng)

    def _split(self, x):
        B, L, _ = x.shape
        dh = self.d_model // self.n_heads
        return T.transpose(T.reshape(x, (B, L, self.n_heads, dh)), (0, 2, 1, 3))

    def __call__(self, queries, keys_values, mask=None, return_weights=False):
        B, Tq, d = queries.shape
        Tk = keys_values.shape[1]
        if keys_values.shape[0] != B or keys_values.shape[2] != d:
            raise ShapeError(f"attention inputs disagree: {queries.shape} vs {keys_values.shape}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            try:
                mask = np.broadcast_to(mask, (B, Tq, Tk))
            except ValueError:
                raise ShapeError(f"mask of shape {mask.shape} does not fit attention ({B}, {Tq}, {Tk})") from None

        k = self.k_proj(keys_values)
        v = self.v_proj(keys_values)
        m = self.memory_slots
        if m:
            k = T.concat([k, T.broadcast_to(self.memory_k, (B, m, d))], axis=1)
            v = T.concat([v, T.broadcast_to(self.memory_v, (B, m, d))], axis=1)
            if mask is not None:
                mask = np.concatenate([mask, np.ones((B, Tq, m), dtype=bool)], axis=2)

        q = self._split(self.q_proj(queries))
        k = self._split(k)
        v = self._split(v)
        dh = d // self.n_heads
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        if mask is not None:
            scores = T.masked_fill(scores, mask[:, None, :, :])
        weights = T.softmax(scores, axis=-1)
        ctx = T.matmul(self.drop(weights), v)
        out = self.out_proj(T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d)))
        if return_weights:
            return out, weights.data
        return out


class MeshedCrossAttention(Module):
    """Cross-attention to every encoder layer, mixed by learned sigmoid gates.

    out = sum_l sigmoid(W_l [h; C_l] + b_l) * C_l / sqrt(L), where C_l is the
    (shared-weight) attention of ``h`` over encoder layer ``l``.
    """

    def __init__(self, d_model, n_heads, n_enc_layers, rng, dropout=0.0):
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dropout=dropout)
        self.gates = [Linear(2 * d_model, d_model, rng) for _ in range(n_enc_layers)]

    def __call__(self, h, enc_outputs, mask=None):
        if not enc_outputs:
            raise ShapeError("meshed cross-attention needs at least one encoder output")
        if len(enc_outputs) != len(self.gates):
            raise ShapeError(f"expected {len(self.gates)} encoder outputs, got {len(enc_outputs)}")
        total = None
        for enc, gate in zip(enc_outputs, self.gates):
            c = self.attn(h, enc, mask)
            alpha = T.sigmoid(gate(T.concat([h, c], axis=-1)))
            term = alpha * c
            total = term if total is None else total + term
        return total * (1.0 / np.sqrt(len(enc_outputs)))


class FeedForward(Module):
    def __init__(self, d_model, d_ff, rng, dropout=0.0):
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)
        self.drop = Dropout(dropout, rng)

    def __call__(self, x):
        return self.fc2(self.drop(T.relu(self.fc1(x))))


class EncoderLayer(Module):
    def __init__(self, cfg, rng, memory_slots):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, memory_slots, cfg.dropout)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.dropout)
        self.norm2 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, x, mask):
        x = self.norm1(x + self.drop(self.self_attn(x, x, mask)))
        return self.norm2(x + self.drop(self.ff(x)))


class Encoder(Module):
    """Positional encoding followed by ``n_enc_layers`` memory-augmented blocks.

    Returns the list of every layer's output, which the meshed decoder needs.
    """

    def __init__(self, cfg, rng, memory_slots=None):
        m = cfg.memory_slots if memory_slots is None else memory_slots
        self.max_len = cfg.max_len
        self._pe = positional_encoding(cfg.max_len, cfg.d_model)
        self.layers = [EncoderLayer(cfg, rng, m) for _ in range(cfg.n_enc_layers)]
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, x, key_keep=None):
        S = x.shape[1]
        if S > self.max_len:
            raise DataError(f"source length {S} exceeds max_len {self.max_len}")
        mask = attention_mask(key_keep)
        h = self.drop(x + self._pe[:S])
        outputs = []
        for layer in self.layers:
            h = layer(h, mask)
            outputs.append(h)
        return outputs


class DecoderLayer(Module):
    def __init__(self, cfg, rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, 0, cfg.dropout)
        self.norm1 = LayerNorm(cfg.d_model)
        self.mesh = cfg.mesh
        if cfg.mesh:
            self.cross = MeshedCrossAttention(cfg.d_model, cfg.n_heads, cfg.n_enc_layers, rng, cfg.dropout)
        else:
            self.cross = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, 0, cfg.dropout)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.dropout)
        self.norm3 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, y, enc_outputs, self_mask, cross_mask):
        y = self.norm1(y + self.drop(self.self_attn(y, y, self_mask)))
        if self.mesh:
            c = self.cross(y, enc_outputs, cross_mask)
        else:
            c = self.cross(y, enc_outputs[-1], cross_mask)
        y = self.norm2(y + self.drop(c))
        return self.norm3(y + self.drop(self.ff(y)))


class Decoder(Module):
    """Token embedding, causal blocks with (meshed) cross-attention, vocabulary head."""

    def __init__(self, cfg, vocab_size, rng):
        self.d_model = cfg.d_model
        self.max_len = cfg.max_len
        self.vocab_size = vocab_size
        self._pe = positional_encoding(cfg.max_len, cfg.d_model)
        self.embed = Embedding(vocab_size, cfg.d_model, rng)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.n_dec_layers)]
        self.head = Linear(cfg.d_model, vocab_size, rng)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, tgt_ids, enc_outputs, enc_keep=None, tgt_keep=None):
        tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
        if tgt_ids.ndim == 1:
            tgt_ids = tgt_ids[None]
        Tn = tgt_ids.shape[1]
        if Tn > self.max_len:
            raise DataError(f"target length {Tn} exceeds max_len {self.max_len}")
        if tgt_ids.size and (tgt_ids.min() < 0 or tgt_ids.max() >= self.vocab_size):
            raise DataError(f"token id outside vocabulary of size {self.vocab_size}")
        self_mask = attention_mask(tgt_keep, Tn, causal=True)
        cross_mask = attention_mask(enc_keep)
        y = self.embed(tgt_ids) * np.sqrt(self.d_model) + self._pe[:Tn]
        y = self.drop(y)
        for layer in self.layers:
            y = layer(y, enc_outputs, self_mask, cross_mask)
        return self.head(y)
