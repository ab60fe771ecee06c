"""Second-pass decoder that refines a first-pass draft.

Each second-pass layer runs, in order: causal self-attention, encoder
cross-attention, draft cross-attention (keys/values = the draft memory,
unmasked over the whole draft, which is what gives the pass right-side
context), optional visual cross-attention, feed-forward; all pre-norm
residual.

The draft memory row for draft token t is the first pass's final hidden
state at the position that produced t, concatenated with t's embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .decoding import Hypothesis, beam_search, model_step_fn
from .errors import FormatError, ShapeError
from .layers import (
    AttentionMask,
    FeedForward,
    LayerNormParams,
    MultiHeadAttention,
    SublayerConnection,
    causal_mask,
)
from .model import BOS, EOS, EncoderMemory, ModelConfig, TransformerMT
from .tensor import Tensor, concat, embedding, matmul, no_grad


@dataclass
class DraftOutput:
    """One first-pass draft: its tokens and the memory the second pass attends."""

    tokens: np.ndarray            # [draft_len] token ids, EOS-terminated
    memory: Tensor                # [draft_len, d_model + d_emb]
    score: float                  # beam log-probability
    forced: bool = False          # True when the draft never reached EOS

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.memory.shape[0] != len(self.tokens):
            raise ShapeError(
                f"draft memory rows {self.memory.shape[0]} != token count "
                f"{len(self.tokens)}"
            )


@dataclass
class DraftSet:
    """n-best drafts for one source sentence, sorted by descending score."""

    drafts: list[DraftOutput] = dc_field(default_factory=list)

    def __post_init__(self):
        if not self.drafts:
            raise ShapeError("a draft set cannot be empty")
        scores = [d.score for d in self.drafts]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ShapeError("draft set not sorted by descending score")
        seqs = {tuple(d.tokens.tolist()) for d in self.drafts}
        if len(seqs) != len(self.drafts):
            raise ShapeError("draft set contains duplicate token sequences")

    def __len__(self):
        return len(self.drafts)

    def __getitem__(self, i):
        return self.drafts[i]


def build_draft_memory(hidden: Tensor, tokens, embed_table: Tensor) -> DraftOutput:
    """Concatenate first-pass hidden states with the drafted tokens' embeddings."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if hidden.shape[0] != len(tokens):
        raise ShapeError(
            f"hidden rows {hidden.shape[0]} != draft token count {len(tokens)}"
        )
    emb = embedding(embed_table, tokens, scale=False)
    memory = concat([hidden, emb], axis=1)
    return DraftOutput(tokens=tokens, memory=memory, score=0.0)


def draft_from_hypothesis(model, hyp: Hypothesis, mem: EncoderMemory,
                          visual_keys=None) -> DraftOutput:
    """Re-run the first pass over a finished hypothesis to capture its memory."""
    tokens = np.asarray(hyp.ids[1:], dtype=np.int64)  # drop BOS, keep EOS
    prefix = np.asarray(hyp.ids[:-1], dtype=np.int64)
    with no_grad():
        _, hidden = model.decode(prefix, mem, visual_keys=visual_keys)
    draft = build_draft_memory(hidden, tokens, model.tgt_embed)
    draft.score = hyp.log_prob
    draft.forced = hyp.forced
    return draft


def sample_drafts(model: TransformerMT, src, beam: int = 10, n: int = 10,
                  visual_keys=None, mem: EncoderMemory | None = None) -> DraftSet:
    """Top-n first-pass beam hypotheses (ranked by raw log-probability),
    each with its hidden states captured for the draft memory."""
    if n > beam:
        raise ValueError(f"cannot take {n} drafts from a beam of {beam}")
    if mem is None:
        with no_grad():
            mem = model.encode(src)
    step = model_step_fn(model, mem, visual_keys=visual_keys)
    hyps = beam_search(
        step, vocab_size=model.cfg.tgt_vocab, beam=beam,
        max_len=model.cfg.max_len,
    )
    hyps = sorted(hyps, key=lambda h: (-h.log_prob, h.order))[:n]
    return DraftSet([draft_from_hypothesis(model, h, mem, visual_keys) for h in hyps])


class SecondPassLayer:
    """One refinement layer; draft keys/values are d_model + d_emb wide."""

    def __init__(self, cfg: ModelConfig, rng, with_visual: bool = False):
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.draft_attn = MultiHeadAttention(d, cfg.heads, rng,
                                             kv_dim=cfg.d_model + cfg.d_emb)
        self.ffn = FeedForward(d, cfg.d_ff, rng)
        self.sub_self = SublayerConnection(d)
        self.sub_cross = SublayerConnection(d)
        self.sub_draft = SublayerConnection(d)
        self.sub_ffn = SublayerConnection(d)
        self.visual_attn = None
        self.sub_visual = None
        if with_visual:
            self.visual_attn = MultiHeadAttention(d, cfg.heads, rng)
            self.sub_visual = SublayerConnection(d)

    def parameters(self, prefix):
        out = {}
        out.update(self.self_attn.parameters(f"{prefix}.self_attn"))
        out.update(self.sub_self.parameters(f"{prefix}.sub_self"))
        out.update(self.cross_attn.parameters(f"{prefix}.cross_attn"))
        out.update(self.sub_cross.parameters(f"{prefix}.sub_cross"))
        out.update(self.draft_attn.parameters(f"{prefix}.draft_attn"))
        out.update(self.sub_draft.parameters(f"{prefix}.sub_draft"))
        if self.visual_attn is not None:
            out.update(self.visual_attn.parameters(f"{prefix}.visual_attn"))
            out.update(self.sub_visual.parameters(f"{prefix}.sub_visual"))
        out.update(self.ffn.parameters(f"{prefix}.ffn"))
        out.update(self.sub_ffn.parameters(f"{prefix}.sub_ffn"))
        return out

    def __call__(self, x, mem: EncoderMemory, draft_memory, self_mask,
                 visual_keys, p_drop, rng, trace=None, prefix=""):
        q_len = x.shape[0]
        x = self.sub_self(
            x, lambda h: self.self_attn(h, h, h, mask=self_mask), p_drop, rng,
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
        if draft_memory is not None:
            x = self.sub_draft(
                x,
                lambda h: self.draft_attn(
                    h, draft_memory, draft_memory,
                    trace=trace, trace_key=f"{prefix}.draft_attn",
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


class DeliberationModel:
    """Base transformer plus a second-pass refinement decoder.

    visual modes: none (text-only), sum (image vector added to encoder
    memory), att/obj (visual cross-attention inside the second-pass layers
    only; the first pass stays text-only).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, visual: str = "none"):
        if visual not in ("none", "sum", "att", "obj"):
            raise ValueError(f"unknown visual mode {visual!r}")
        # the base half never carries AIF sublayers; AIC lives at memory level
        self.base = TransformerMT(cfg, seed=seed, visual="none")
        self.cfg = cfg
        self.visual = visual
        self.seed = seed
        rng = np.random.default_rng(np.random.default_rng(seed + 0x5EC0).integers(2**63))
        with_visual = visual in ("att", "obj")
        self.second_layers = [
            SecondPassLayer(cfg, rng, with_visual=with_visual)
            for _ in range(cfg.delib_layers)
        ]
        self.second_norm = LayerNormParams(cfg.d_model)
        self.aic_proj = None
        self.visual_proj = None
        d = cfg.d_model
        if visual == "sum":
            self.aic_proj = Tensor(
                rng.uniform(
                    -np.sqrt(6.0 / (cfg.bag_dim + d)),
                    np.sqrt(6.0 / (cfg.bag_dim + d)),
                    size=(cfg.bag_dim, d),
                ),
                requires_grad=True,
            )
        elif visual == "att":
            self.visual_proj = Tensor(
                rng.uniform(
                    -np.sqrt(6.0 / (cfg.spatial_channels + d)),
                    np.sqrt(6.0 / (cfg.spatial_channels + d)),
                    size=(cfg.spatial_channels, d),
                ),
                requires_grad=True,
            )
        elif visual == "obj":
            self.visual_proj = Tensor(
                rng.uniform(
                    -np.sqrt(6.0 / (cfg.obj_dim + d)),
                    np.sqrt(6.0 / (cfg.obj_dim + d)),
                    size=(cfg.obj_dim, d),
                ),
                requires_grad=True,
            )

    @property
    def rng(self):
        return self.base.rng

    @property
    def tgt_embed(self):
        return self.base.tgt_embed

    def encode(self, src, **kw) -> EncoderMemory:
        return self.base.encode(src, **kw)

    def decode(self, tgt_prefix, mem, **kw):
        """First-pass decode (text-only)."""
        return self.base.decode(tgt_prefix, mem, **kw)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.base.parameters())
        for i, layer in enumerate(self.second_layers):
            out.update(layer.parameters(f"second_pass.layer{i}"))
        out.update(self.second_norm.parameters("second_pass.norm"))
        if self.aic_proj is not None:
            out["visual.aic_proj"] = self.aic_proj
        if self.visual_proj is not None:
            out["visual.proj"] = self.visual_proj
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def _second_pass_hidden(self, prefix, mem, draft_memory, visual_keys,
                            train, trace):
        p = self.cfg.dropout if train else 0.0
        x = self.base._embed_input(prefix, self.base.tgt_embed, train)
        self_mask = causal_mask(len(prefix))
        for i, layer in enumerate(self.second_layers):
            x = layer(x, mem, draft_memory, self_mask, visual_keys,
                      p, self.base.rng, trace=trace,
                      prefix=f"second_pass.layer{i}")
        return self.second_norm(x)

    def second_pass_decode(self, tgt_prefix, mem: EncoderMemory,
                           draft: DraftOutput, visual_keys=None,
                           train: bool = False, trace: dict | None = None):
        """Refinement logits over a BOS-led prefix given a full draft."""
        prefix = np.asarray(tgt_prefix, dtype=np.int64)
        if prefix.size == 0 or prefix[0] != BOS:
            raise ShapeError("second-pass prefix must begin with BOS")
        if prefix.size > self.cfg.max_len:
            raise ShapeError(
                f"prefix length {prefix.size} exceeds max_len {self.cfg.max_len}"
            )
        if draft is None or len(draft.tokens) == 0:
            raise ShapeError("second pass requires a non-empty draft")
        hidden = self._second_pass_hidden(
            prefix, mem, draft.memory, visual_keys, train, trace
        )
        return matmul(hidden, self.base.tgt_embed.T)


def init_from_base(base: TransformerMT, cfg: ModelConfig | None = None,
                   seed: int = 0, visual: str = "none") -> DeliberationModel:
    """Wrap a trained base model: encoder and first-pass decoder weights are
    copied, the second-pass decoder starts from a fresh scaled-uniform init."""
    cfg = cfg if cfg is not None else base.cfg
    diff = base.cfg.diff(cfg)
    if diff:
        raise ShapeError(
            "base checkpoint config incompatible with deliberation config; "
            f"differing fields: {', '.join(sorted(diff))}"
        )
    model = DeliberationModel(cfg, seed=seed, visual=visual)
    src, dst = base.parameters(), model.base.parameters()
    for name, p in src.items():
        dst[name].data = p.data.copy()
    return model


# ------------------------------------------------------------ draft cache io


def save_draft_cache(path, draft_sets: list[DraftSet]) -> None:
    """One line per sentence: index, then TAB-separated `score id id ...` records."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, ds in enumerate(draft_sets):
            records = [
                " ".join([repr(float(d.score))] + [str(t) for t in d.tokens])
                for d in ds.drafts
            ]
            fh.write("\t".join([str(i)] + records) + "\n")


def load_draft_cache(path, model: TransformerMT | None = None,
                     sources=None) -> list:
    """Read a draft cache.

    Without a model, returns per-sentence lists of (score, token ids).
    With `model` and `sources`, regenerates the hidden states by re-running
    the first pass and returns full DraftSets.
    """
    raw: list[list[tuple[float, np.ndarray]]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            try:
                idx = int(fields[0])
            except ValueError as exc:
                raise FormatError(
                    f"draft cache line {lineno + 1}: bad sentence index"
                ) from exc
            if idx != len(raw):
                raise FormatError(
                    f"draft cache line {lineno + 1}: expected index {len(raw)}, got {idx}"
                )
            entry = []
            for rec in fields[1:]:
                parts = rec.split(" ")
                try:
                    score = float(parts[0])
                    ids = np.asarray([int(x) for x in parts[1:]], dtype=np.int64)
                except ValueError as exc:
                    raise FormatError(
                        f"draft cache line {lineno + 1}: bad record {rec!r}"
                    ) from exc
                if ids.size == 0:
                    raise FormatError(
                        f"draft cache line {lineno + 1}: empty token sequence"
                    )
                entry.append((score, ids))
            if not entry:
                raise FormatError(f"draft cache line {lineno + 1}: no drafts")
            raw.append(entry)
    if model is None:
        return raw
    if sources is None:
        raise ValueError("regenerating draft memories requires the source sentences")
    if len(sources) != len(raw):
        raise FormatError(
            f"draft cache has {len(raw)} sentences, got {len(sources)} sources"
        )
    out = []
    for src, entry in zip(sources, raw):
        with no_grad():
            mem = model.encode(src)
        drafts = []
        for score, ids in entry:
            hyp = Hypothesis(
                ids=np.concatenate([[BOS], ids]), log_prob=score,
                normalized_score=score / max(len(ids), 1),
            )
            d = draft_from_hypothesis(model, hyp, mem)
            drafts.append(d)
        out.append(DraftSet(drafts))
    return out
