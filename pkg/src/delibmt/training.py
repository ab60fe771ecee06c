"""Training loops: base model, then joint deliberation training on
precomputed drafts. Both use Adam with the warmup schedule and early
stopping on validation BLEU (greedy validation decoding)."""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .decoding import greedy_decode, model_step_fn
from .deliberation import DeliberationModel, build_draft_memory
from .errors import ShapeError, TrainingDivergedError
from .metrics import bleu
from .model import BOS, Batch, EOS, TransformerMT, cross_entropy_loss
from .optim import Adam, lr_schedule
from .tensor import Tensor, no_grad
from .visual import VisualFeatures, condition_aic, project_visual


def log_kv(**kw) -> None:
    print(" ".join(f"{k}={v}" for k, v in kw.items()))
    sys.stdout.flush()


@dataclass
class TrainSettings:
    lr_base: float = 0.05
    warmup: int = 8000
    patience: int = 10
    max_epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    log_every: int = 0        # epochs between log lines; 0 silences
    beam: int = 10            # first-pass beam for draft sampling
    draft_n: int = 10


class EarlyStopping:
    """Stop after `patience` consecutive epochs without a new best score."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record an epoch score; returns True when training should stop."""
        if self.best is None or score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _snapshot(model) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.parameters().items()}


def _restore(model, snap: dict[str, np.ndarray]) -> None:
    for k, p in model.parameters().items():
        p.data = snap[k].copy()


def visual_keys_for(model, feats: VisualFeatures | None):
    if feats is None or model.visual not in ("att", "obj"):
        return None
    return project_visual(feats, model.visual_proj)


def memory_for(model, src, feats: VisualFeatures | None, train: bool):
    mem = model.encode(src, train=train)
    if model.visual == "sum" and feats is not None:
        mem = condition_aic(mem, feats.data, model.aic_proj)
    return mem


def greedy_translate(model, src, feats: VisualFeatures | None = None,
                     max_len: int | None = None) -> list[int]:
    """First-pass greedy output ids (no BOS/EOS)."""
    with no_grad():
        mem = memory_for(model, src, feats, train=False)
        vk = visual_keys_for(model, feats)
        hyp = greedy_decode(
            model_step_fn(model, mem, visual_keys=vk),
            vocab_size=model.cfg.tgt_vocab,
            max_len=max_len or model.cfg.max_len,
        )
    return [t for t in hyp.ids.tolist()[1:] if t != EOS]


def _validation_bleu(model, val_pairs, features=None) -> float:
    hyps, refs = [], []
    for i, (src, tgt) in enumerate(val_pairs):
        feats = features.features_for(i) if features is not None else None
        hyps.append(greedy_translate(model, src, feats))
        refs.append(list(tgt))
    return bleu(hyps, refs).score


def train_base(model: TransformerMT, train_pairs, val_pairs,
               settings: TrainSettings, features=None) -> Checkpoint:
    """Train until validation BLEU stops improving; returns the best state.

    train_pairs/val_pairs are (src_ids, tgt_ids) sequences; features, when
    given, supply per-sentence visual context for base+sum/att/obj systems.
    """
    if not train_pairs or not val_pairs:
        raise ShapeError("training requires non-empty train and validation sets")
    params = model.parameters()
    opt = Adam(params)
    stopper = EarlyStopping(settings.patience)
    order_rng = np.random.default_rng(settings.seed)
    best_snap = _snapshot(model)
    step = 0
    losses: list[float] = []

    for epoch in range(settings.max_epochs):
        order = order_rng.permutation(len(train_pairs))
        for start in range(0, len(order), settings.batch_size):
            batch_idx = order[start:start + settings.batch_size]
            opt.zero_grad()
            total = None
            for i in batch_idx:
                src, tgt = train_pairs[i]
                feats = features.features_for(int(i)) if features is not None else None
                b = Batch.from_pair(src, tgt)
                mem = memory_for(model, b.src, feats, train=True)
                vk = visual_keys_for(model, feats)
                logits, _ = model.decode(b.tgt_in, mem, visual_keys=vk, train=True)
                loss = cross_entropy_loss(logits, b.tgt_out, b.tgt_pad)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch_idx))
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at step {step + 1}"
                )
            losses.append(value)
            total.backward()
            step += 1
            opt.step(lr_schedule(step, settings.lr_base, settings.warmup,
                                 model.cfg.d_model))

        score = _validation_bleu(model, val_pairs, features)
        improved = stopper.best is None or score > stopper.best
        stop = stopper.update(epoch, score)
        if improved:
            best_snap = _snapshot(model)
        if settings.log_every and (epoch + 1) % settings.log_every == 0:
            log_kv(phase="base", epoch=epoch, step=step,
                   loss=f"{value:.4f}", val_bleu=f"{score:.2f}",
                   best=f"{stopper.best:.2f}")
        if stop:
            break

    _restore(model, best_snap)
    ckpt = Checkpoint.from_model(model, meta={
        "best_val_bleu": f"{stopper.best:.6f}",
        "step": step,
        "seed": settings.seed,
        "epoch": stopper.best_epoch,
    })
    ckpt.meta["loss_curve_len"] = str(len(losses))
    ckpt.losses = losses  # in-memory only; not serialized
    return ckpt


def refine_translate(model: DeliberationModel, src,
                     feats: VisualFeatures | None = None,
                     beam: int = 1, max_len: int | None = None,
                     draft_tokens=None):
    """Full refine pipeline for one sentence.

    Draft = top first-pass beam hypothesis (or the supplied cached tokens);
    returns (draft ids, refined ids), both without BOS/EOS.
    """
    from .deliberation import sample_drafts

    max_len = max_len or model.cfg.max_len
    with no_grad():
        mem = memory_for(model, src, feats, train=False)
        vk = visual_keys_for(model, feats)
        if draft_tokens is None:
            ds = sample_drafts(model.base, src, beam=beam, n=1, mem=mem)
            draft = ds[0]
        else:
            draft_tokens = np.asarray(draft_tokens, dtype=np.int64)
            prefix = np.concatenate([[BOS], draft_tokens[:-1]])
            _, hidden = model.decode(prefix, mem)
            draft = build_draft_memory(hidden, draft_tokens, model.tgt_embed)
        hyp = greedy_decode(
            model_step_fn(model, mem, visual_keys=vk, draft=draft),
            vocab_size=model.cfg.tgt_vocab, max_len=max_len,
        )
    draft_ids = [t for t in draft.tokens.tolist() if t != EOS]
    refined_ids = [t for t in hyp.ids.tolist()[1:] if t != EOS]
    return draft_ids, refined_ids


def _delib_validation_bleu(model: DeliberationModel, val_pairs,
                           features=None) -> float:
    hyps, refs = [], []
    for i, (src, tgt) in enumerate(val_pairs):
        feats = features.features_for(i) if features is not None else None
        _, refined = refine_translate(model, src, feats, beam=1)
        hyps.append(refined)
        refs.append(list(tgt))
    return bleu(hyps, refs).score


def train_deliberation(model: DeliberationModel, train_pairs, val_pairs,
                       draft_sets, settings: TrainSettings,
                       features=None) -> Checkpoint:
    """Joint training: per step one draft is sampled uniformly from the
    pair's draft set, and the loss is CE(second pass) + CE(first pass).

    draft_sets holds one list of (score, token ids) per training pair; the
    draft memory is rebuilt each step from the current first-pass weights
    (outside the tape). Validation decodes the second pass with a greedy
    first-pass draft.
    """
    if len(draft_sets) != len(train_pairs):
        missing = len(train_pairs) - len(draft_sets)
        raise ShapeError(
            f"need one draft set per training pair; {missing:+d} mismatch"
        )
    params = model.parameters()
    opt = Adam(params)
    stopper = EarlyStopping(settings.patience)
    order_rng = np.random.default_rng(settings.seed)
    draft_rng = np.random.default_rng(settings.seed + 1)
    best_snap = _snapshot(model)
    step = 0
    losses: list[float] = []

    for epoch in range(settings.max_epochs):
        order = order_rng.permutation(len(train_pairs))
        for start in range(0, len(order), settings.batch_size):
            batch_idx = order[start:start + settings.batch_size]
            opt.zero_grad()
            total = None
            for i in batch_idx:
                src, tgt = train_pairs[i]
                feats = features.features_for(int(i)) if features is not None else None
                b = Batch.from_pair(src, tgt)
                mem = memory_for(model, b.src, feats, train=True)
                vk = visual_keys_for(model, feats)

                logits1, _ = model.decode(b.tgt_in, mem, train=True)
                ce1 = cross_entropy_loss(logits1, b.tgt_out, b.tgt_pad)

                choices = draft_sets[int(i)]
                score, draft_tokens = choices[int(draft_rng.integers(len(choices)))]
                with no_grad():
                    dmem = memory_for(model, b.src, feats, train=False)
                    prefix = np.concatenate([[BOS], draft_tokens[:-1]])
                    _, hidden = model.decode(prefix, dmem)
                    draft = build_draft_memory(hidden, draft_tokens,
                                               model.tgt_embed.detach())
                draft.score = score
                logits2 = model.second_pass_decode(
                    b.tgt_in, mem, draft, visual_keys=vk, train=True
                )
                ce2 = cross_entropy_loss(logits2, b.tgt_out, b.tgt_pad)
                loss = ce1 + ce2
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch_idx))
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at step {step + 1}"
                )
            losses.append(value)
            total.backward()
            step += 1
            opt.step(lr_schedule(step, settings.lr_base, settings.warmup,
                                 model.cfg.d_model))

        score = _delib_validation_bleu(model, val_pairs, features)
        improved = stopper.best is None or score > stopper.best
        stop = stopper.update(epoch, score)
        if improved:
            best_snap = _snapshot(model)
        if settings.log_every and (epoch + 1) % settings.log_every == 0:
            log_kv(phase="delib", epoch=epoch, step=step,
                   loss=f"{value:.4f}", val_bleu=f"{score:.2f}",
                   best=f"{stopper.best:.2f}")
        if stop:
            break

    _restore(model, best_snap)
    ckpt = Checkpoint.from_model(model, meta={
        "best_val_bleu": f"{stopper.best:.6f}",
        "step": step,
        "seed": settings.seed,
        "epoch": stopper.best_epoch,
    })
    ckpt.losses = losses
    return ckpt
