"""Base text-only translation model: encoder stack, first-pass decoder stack,
cross-entropy loss. Pre-norm residual layout with a final layer norm per
stack; output projection tied to the target embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ShapeError
from .layers import (
    AttentionMask,
    FeedForward,
    LayerNormParams,
    MultiHeadAttention,
    SublayerConnection,
    causal_mask,
    positional_encoding,
)
from .tensor import Tensor, dropout, embedding, log_softmax, matmul

PAD, BOS, EOS, UNK, BLANK = 0, 1, 2, 3, 4


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 512
    d_ff: int = 2048
    heads: int = 8
    enc_layers: int = 6
    dec_layers: int = 6
    delib_layers: int = 3
    d_emb: int | None = None
    dropout: float = 0.1
    max_len: int = 100
    # visual dimensions (used only by the matching conditioning mode)
    bag_dim: int = 545
    obj_dim: int = 50
    spatial_channels: int = 2048

    def __post_init__(self):
        if self.d_emb is None:
            self.d_emb = self.d_model
        self.validate()

    def validate(self) -> None:
        positive = [
            "src_vocab", "tgt_vocab", "d_model", "d_ff", "heads", "enc_layers",
            "dec_layers", "delib_layers", "d_emb", "max_len", "bag_dim",
            "obj_dim", "spatial_channels",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ShapeError(f"config field {name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads != 0:
            raise ShapeError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        if self.delib_layers > self.dec_layers:
            raise ShapeError(
                f"delib_layers {self.delib_layers} exceeds dec_layers {self.dec_layers}"
            )
        if self.d_emb != self.d_model:
            raise ShapeError(
                f"d_emb {self.d_emb} must equal d_model {self.d_model} "
                "(embedding and model widths are tied)"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def desk_scale(cls, src_vocab: int, tgt_vocab: int, **kw) -> "ModelConfig":
        """Laptop-sized configuration used throughout the test suite."""
        defaults = dict(d_model=128, d_ff=256, heads=4,
                        enc_layers=2, dec_layers=2, delib_layers=2)
        defaults.update(kw)
        return cls(src_vocab=src_vocab, tgt_vocab=tgt_vocab, **defaults)

    def diff(self, other: "ModelConfig") -> list[str]:
        return [
            f.name for f in fields(self)
            if getattr(self, f.name) != getattr(other, f.name)
        ]

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass
class EncoderMemory:
    """Per-source-token representations plus the source padding mask."""

    states: Tensor          # [src_len, d_model]
    pad_mask: np.ndarray    # bool [src_len]; True = padding

    def __post_init__(self):
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.states.shape[0] != self.pad_mask.shape[0]:
            raise ShapeError(
                f"memory states rows {self.states.shape[0]} != mask length "
                f"{self.pad_mask.shape[0]}"
            )

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass
class Batch:
    """One training pair: source ids and BOS/EOS-shifted target ids."""

    src: np.ndarray
    src_pad: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_pad: np.ndarray

    @classmethod
    def from_pair(cls, src_ids, tgt_ids) -> "Batch":
        src = np.asarray(src_ids, dtype=np.int64)
        tgt = np.asarray(tgt_ids, dtype=np.int64)
        tgt_in = np.concatenate([[BOS], tgt])
        tgt_out = np.concatenate([tgt, [EOS]])
        return cls(
            src=src,
            src_pad=(src == PAD),
            tgt_in=tgt_in,
            tgt_out=tgt_out,
            tgt_pad=(tgt_out == PAD),
        )

    def __post_init__(self):
        if len(self.tgt_in) != len(self.tgt_out):
            raise ShapeError("tgt_in and tgt_out lengths differ")


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.sub_attn = SublayerConnection(cfg.d_model)
        self.sub_ffn = SublayerConnection(cfg.d_model)

    def parameters(self, prefix):
        out = {}
        out.update(self.self_attn.parameters(f"{prefix}.self_attn"))
        out.update(self.sub_attn.parameters(f"{prefix}.sub_attn"))
        out.update(self.ffn.parameters(f"{prefix}.ffn"))
        out.update(self.sub_ffn.parameters(f"{prefix}.sub_ffn"))
        return out

    def __call__(self, x, mask, query_pad, p_drop, rng):
        x = self.sub_attn(
            x, lambda h: self.self_attn(h, h, h, mask=mask, query_pad=query_pad),
            p_drop, rng,
        )
        return self.sub_ffn(x, self.ffn, p_drop, rng)


class DecoderLayer:
    """Causal self-attention, encoder cross-attention, feed-forward.

    An optional visual cross-attention sublayer (keys/values = projected
    visual rows) sits between the encoder attention and the feed-forward.
    """

    def __init__(self, cfg: ModelConfig, rng, with_visual: bool = False):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.sub_self = SublayerConnection(cfg.d_model)
        self.sub_cross = SublayerConnection(cfg.d_model)
        self.sub_ffn = SublayerConnection(cfg.d_model)
        self.visual_attn = None
        self.sub_visual = None
        if with_visual:
            self.visual_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
            self.sub_visual = SublayerConnection(cfg.d_model)

    def parameters(self, prefix):
        out = {}
        out.update(self.self_attn.parameters(f"{prefix}.self_attn"))
        out.update(self.sub_self.parameters(f"{prefix}.sub_self"))
        out.update(self.cross_attn.parameters(f"{prefix}.cross_attn"))
        out.update(self.sub_cross.parameters(f"{prefix}.sub_cross"))
        if self.visual_attn is not None:
            out.update(self.visual_attn.parameters(f"{prefix}.visual_attn"))
            out.update(self.sub_visual.parameters(f"{prefix}.sub_visual"))
        out.update(self.ffn.parameters(f"{prefix}.ffn"))
        out.update(self.sub_ffn.parameters(f"{prefix}.sub_ffn"))
        return out

    def __call__(self, x, mem: EncoderMemory, self_mask, visual_keys,
                 p_drop, rng, trace=None, prefix=""):
        q_len = x.shape[0]
        x = self.sub_self(
            x, lambda h: self.self_attn(h, h, h, mask=self_mask),
            p_drop, rng,
        )
        cross_mask = AttentionMask.from_key_padding(q_len, mem.pad_mask)
        x = self.sub_cross(
            x,
            lambda h: self.cross_attn(
                h, mem.states, mem.states, mask=cross_mask,
                trace=trace, trace_key=f"{prefix}.cross_attn",
            ),
            p_drop, rng,
        )
        if self.visual_attn is not None and visual_keys is not None:
            x = self.sub_visual(
                x,
                lambda h: self.visual_attn(
                    h, visual_keys, visual_keys,
                    trace=trace, trace_key=f"{prefix}.visual_attn",
                ),
                p_drop, rng,
            )
        return self.sub_ffn(x, self.ffn, p_drop, rng)


class TransformerMT:
    """Encoder plus first-pass decoder (optionally with visual conditioning).

    `visual` is one of none|sum|att|obj; sum adds a projected image vector to
    the encoder memory, att/obj give every decoder layer a cross-attention
    sublayer over projected visual rows.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, visual: str = "none"):
        if visual not in ("none", "sum", "att", "obj"):
            raise ValueError(f"unknown visual mode {visual!r}")
        self.cfg = cfg
        self.visual = visual
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.rng = np.random.default_rng(rng.integers(2**63))  # dropout stream
        d = cfg.d_model
        self.src_embed = Tensor(
            rng.normal(0.0, d**-0.5, size=(cfg.src_vocab, d)), requires_grad=True
        )
        self.tgt_embed = Tensor(
            rng.normal(0.0, d**-0.5, size=(cfg.tgt_vocab, d)), requires_grad=True
        )
        self.enc_layers = [EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)]
        self.enc_norm = LayerNormParams(d)
        with_visual = visual in ("att", "obj")
        self.dec_layers = [
            DecoderLayer(cfg, rng, with_visual=with_visual)
            for _ in range(cfg.dec_layers)
        ]
        self.dec_norm = LayerNormParams(d)
        self.aic_proj = None
        self.visual_proj = None
        if visual == "sum":
            self.aic_proj = Tensor(
                np.asarray(_scaled_uniform(rng, cfg.bag_dim, d)), requires_grad=True
            )
        elif visual == "att":
            self.visual_proj = Tensor(
                np.asarray(_scaled_uniform(rng, cfg.spatial_channels, d)),
                requires_grad=True,
            )
        elif visual == "obj":
            self.visual_proj = Tensor(
                np.asarray(_scaled_uniform(rng, cfg.obj_dim, d)), requires_grad=True
            )
        self._pe_cache: dict[str, np.ndarray] = {}

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {"src_embed": self.src_embed, "tgt_embed": self.tgt_embed}
        for i, layer in enumerate(self.enc_layers):
            out.update(layer.parameters(f"encoder.layer{i}"))
        out.update(self.enc_norm.parameters("encoder.norm"))
        for i, layer in enumerate(self.dec_layers):
            out.update(layer.parameters(f"decoder.layer{i}"))
        out.update(self.dec_norm.parameters("decoder.norm"))
        if self.aic_proj is not None:
            out["visual.aic_proj"] = self.aic_proj
        if self.visual_proj is not None:
            out["visual.proj"] = self.visual_proj
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    # -- forward passes ---------------------------------------------------------

    def _positions(self, length: int, d: int) -> Tensor:
        if "pe" not in self._pe_cache:
            self._pe_cache["pe"] = positional_encoding(self.cfg.max_len, d)
        return Tensor(self._pe_cache["pe"][:length])

    def _embed_input(self, ids, table, train):
        ids = np.asarray(ids, dtype=np.int64)
        x = embedding(table, ids, scale=True) + self._positions(len(ids), self.cfg.d_model)
        if train and self.cfg.dropout > 0:
            x = dropout(x, self.cfg.dropout, self.rng)
        return x

    def encode(self, src, src_pad=None, train: bool = False) -> EncoderMemory:
        src = np.asarray(src, dtype=np.int64)
        if src.size == 0:
            raise ShapeError("cannot encode an empty source")
        if src.size > self.cfg.max_len:
            raise ShapeError(
                f"source length {src.size} exceeds max_len {self.cfg.max_len}"
            )
        if src_pad is None:
            src_pad = src == PAD
        src_pad = np.asarray(src_pad, dtype=bool)
        p = self.cfg.dropout if train else 0.0
        x = self._embed_input(src, self.src_embed, train)
        mask = AttentionMask.from_key_padding(len(src), src_pad)
        for layer in self.enc_layers:
            x = layer(x, mask, src_pad, p, self.rng)
        return EncoderMemory(states=self.enc_norm(x), pad_mask=src_pad)

    def decode(self, tgt_prefix, mem: EncoderMemory, visual_keys=None,
               train: bool = False, trace: dict | None = None):
        """Run the decoder on a BOS-led prefix.

        Returns (logits [len, tgt_vocab], hidden [len, d_model]); hidden is the
        final pre-softmax state that draft memories are built from.
        """
        prefix = np.asarray(tgt_prefix, dtype=np.int64)
        if prefix.size == 0 or prefix[0] != BOS:
            raise ShapeError("decoder prefix must begin with BOS")
        if prefix.size > self.cfg.max_len:
            raise ShapeError(
                f"prefix length {prefix.size} exceeds max_len {self.cfg.max_len}"
            )
        p = self.cfg.dropout if train else 0.0
        x = self._embed_input(prefix, self.tgt_embed, train)
        self_mask = causal_mask(len(prefix))
        for i, layer in enumerate(self.dec_layers):
            x = layer(x, mem, self_mask, visual_keys, p, self.rng,
                      trace=trace, prefix=f"decoder.layer{i}")
        hidden = self.dec_norm(x)
        logits = matmul(hidden, self.tgt_embed.T)
        return logits, hidden


def _scaled_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def cross_entropy_loss(logits: Tensor, targets, pad_mask) -> Tensor:
    """Mean negative log-likelihood over non-pad positions, no label smoothing."""
    targets = np.asarray(targets, dtype=np.int64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if logits.shape[0] != targets.shape[0] or targets.shape[0] != pad_mask.shape[0]:
        raise ShapeError(
            f"cross entropy shapes disagree: logits {logits.shape}, "
            f"targets {targets.shape}, pad {pad_mask.shape}"
        )
    keep = ~pad_mask
    n = int(keep.sum())
    if n == 0:
        raise ShapeError("cross entropy over a fully padded target")
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.flatnonzero(keep), targets[keep]]
    return -(picked.sum() / n)
