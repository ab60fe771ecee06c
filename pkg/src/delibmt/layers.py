"""Transformer sublayers: embeddings, sinusoidal positions, multi-head
attention, feed-forward, and the pre-norm residual wrapper.

Attention masking is additive (-1e9 before softmax) followed by post-softmax
zeroing of disallowed entries, which makes "masked positions get exactly zero
weight" hold bit-exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import MaskError, ShapeError
from .tensor import Tensor, dropout, embedding, layer_norm, matmul, softmax

NEG_INF = -1e9


class AttentionMask:
    """Boolean [query_len x key_len] matrix; True marks attendable keys."""

    def __init__(self, allowed: np.ndarray):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise ShapeError(f"attention mask must be 2-D, got {allowed.shape}")
        self.allowed = allowed

    @property
    def shape(self):
        return self.allowed.shape

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        return AttentionMask(self.allowed & other.allowed)

    @staticmethod
    def full(q_len: int, k_len: int) -> "AttentionMask":
        return AttentionMask(np.ones((q_len, k_len), dtype=bool))

    @staticmethod
    def from_key_padding(q_len: int, key_pad: np.ndarray) -> "AttentionMask":
        """Disallow keys where key_pad is True."""
        key_pad = np.asarray(key_pad, dtype=bool)
        return AttentionMask(np.broadcast_to(~key_pad, (q_len, key_pad.shape[0])))


def causal_mask(length: int) -> AttentionMask:
    """allowed[i][j] iff j <= i."""
    if length < 1:
        raise ShapeError(f"causal mask length must be >= 1, got {length}")
    return AttentionMask(np.tril(np.ones((length, length), dtype=bool)))


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal position table: PE(p,2i)=sin(p/10000^(2i/d)), PE(p,2i+1)=cos."""
    if d % 2 != 0:
        raise ShapeError(f"positional encoding width must be even, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((length, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * freqs)
    pe[:, 1::2] = np.cos(pos * freqs)
    return pe


def embed_tokens(ids, table: Tensor, scale: bool = False) -> Tensor:
    """Look up embedding rows for a token-id sequence."""
    return embedding(table, np.asarray(ids, dtype=np.int64), scale=scale)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MultiHeadAttention:
    """Scaled dot-product attention with h heads and learned projections.

    kv_dim lets keys/values come from a wider source than the queries
    (the draft memory is d_model + d_emb wide).
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator,
                 kv_dim: int | None = None):
        if d_model % heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by heads {heads}")
        kv_dim = kv_dim if kv_dim is not None else d_model
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.kv_dim = kv_dim
        self.wq = Tensor(_glorot(rng, d_model, d_model), requires_grad=True)
        self.wk = Tensor(_glorot(rng, kv_dim, d_model), requires_grad=True)
        self.wv = Tensor(_glorot(rng, kv_dim, d_model), requires_grad=True)
        self.wo = Tensor(_glorot(rng, d_model, d_model), requires_grad=True)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.wo": self.wo,
        }

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 mask: AttentionMask | None = None,
                 query_pad: np.ndarray | None = None,
                 trace: dict | None = None,
                 trace_key: str | None = None) -> Tensor:
        q_len = q.shape[0]
        k_len = k.shape[0]
        if k.shape[0] != v.shape[0]:
            raise ShapeError(
                f"keys and values must have equal length, got {k.shape} vs {v.shape}"
            )
        if mask is not None:
            if mask.shape != (q_len, k_len):
                raise ShapeError(
                    f"mask shape {mask.shape} does not match (q_len, k_len) "
                    f"({q_len}, {k_len})"
                )
            live = np.ones(q_len, dtype=bool) if query_pad is None \
                else ~np.asarray(query_pad, dtype=bool)
            starved = live & ~mask.allowed.any(axis=1)
            if starved.any():
                raise MaskError(
                    f"query rows {np.flatnonzero(starved).tolist()} have no "
                    "attendable key and are not marked as padding"
                )

        h, dh = self.heads, self.d_head
        # [len, d_model] -> [h, len, d_head]
        qh = matmul(q, self.wq).reshape(q_len, h, dh).transpose(1, 0, 2)
        kh = matmul(k, self.wk).reshape(k_len, h, dh).transpose(1, 0, 2)
        vh = matmul(v, self.wv).reshape(k_len, h, dh).transpose(1, 0, 2)

        scores = matmul(qh, kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        if mask is not None:
            additive = np.where(mask.allowed, 0.0, NEG_INF)[None, :, :]
            scores = scores + additive.astype(scores.dtype)
        weights = softmax(scores, axis=-1)
        if mask is not None:
            # exact-zero guarantee for disallowed keys
            weights = weights * mask.allowed[None, :, :].astype(weights.dtype)
        if trace is not None and trace_key is not None:
            trace[trace_key] = weights.data.copy()

        ctx = matmul(weights, vh)  # [h, q_len, d_head]
        merged = ctx.transpose(1, 0, 2).reshape(q_len, self.d_model)
        return matmul(merged, self.wo)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: AttentionMask | None,
                         weights: MultiHeadAttention, **kw) -> Tensor:
    return weights(q, k, v, mask=mask, **kw)


class FeedForward:
    """Position-wise two-layer network, ReLU in between by default."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator,
                 activation=Tensor.relu):
        self.w1 = Tensor(_glorot(rng, d_model, d_ff), requires_grad=True)
        self.b1 = Tensor(np.zeros(d_ff), requires_grad=True)
        self.w2 = Tensor(_glorot(rng, d_ff, d_model), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)
        self.activation = activation

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }

    def __call__(self, x: Tensor) -> Tensor:
        hidden = self.activation(matmul(x, self.w1) + self.b1)
        return matmul(hidden, self.w2) + self.b2


def feed_forward(x: Tensor, w: FeedForward) -> Tensor:
    return w(x)


class SublayerConnection:
    """Pre-norm residual wrapper: x + dropout(sublayer(layer_norm(x)))."""

    def __init__(self, d_model: int):
        self.gamma = Tensor(np.ones(d_model), requires_grad=True)
        self.beta = Tensor(np.zeros(d_model), requires_grad=True)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def __call__(self, x: Tensor, sublayer, p_drop: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
        y = sublayer(layer_norm(x, self.gamma, self.beta))
        if p_drop > 0.0 and rng is not None:
            y = dropout(y, p_drop, rng)
        return x + y


class LayerNormParams:
    """Standalone gamma/beta pair (stack-final normalization)."""

    def __init__(self, d_model: int):
        self.gamma = Tensor(np.ones(d_model), requires_grad=True)
        self.beta = Tensor(np.zeros(d_model), requires_grad=True)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)
