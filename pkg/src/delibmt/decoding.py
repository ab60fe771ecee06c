"""Beam search over any step function that maps a prefix to next-token
log-probabilities. The same engine drives the base decoder and the
second-pass decoder (extras are baked into the step function)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import log_softmax, no_grad

BOS, EOS = 1, 2  # mirrors model.py; kept local so this module stays model-free


@dataclass
class Hypothesis:
    """A finished beam item. ids run BOS..EOS; normalized = log_prob / length
    where length counts generated tokens (everything after BOS)."""

    ids: np.ndarray
    log_prob: float
    normalized_score: float
    forced: bool = False
    order: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)


def _expansion_limit(vocab_size: int, max_len: int) -> int:
    # size of the reachable sequence space, capped to avoid overflow
    limit = 1
    for _ in range(max_len):
        limit *= vocab_size
        if limit > 10**9:
            return 10**9
    return limit


def beam_search(step_fn, *, vocab_size: int, beam: int, max_len: int,
                bos: int = BOS, eos: int = EOS,
                length_norm: bool = True) -> list[Hypothesis]:
    """Breadth-limited search; returns completed hypotheses sorted by
    normalized score (raw log-prob if length_norm is off), best first.

    step_fn(prefix_ids) -> np.ndarray[vocab_size] of log-probabilities.
    If nothing reaches EOS within max_len, the surviving beams are
    EOS-terminated and flagged `forced`.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    limit = _expansion_limit(vocab_size, max_len)
    if beam > limit:
        warnings.warn(
            f"beam {beam} exceeds the {vocab_size}^{max_len} expansion limit; "
            f"clamping to {limit}"
        )
        beam = limit

    live: list[tuple[list[int], float]] = [([bos], 0.0)]
    completed: list[Hypothesis] = []
    counter = 0
    for _ in range(max_len):
        candidates: list[tuple[float, int, list[int]]] = []
        for prefix, lp in live:
            logp = np.asarray(step_fn(prefix), dtype=np.float64)
            if logp.shape != (vocab_size,):
                raise ValueError(
                    f"step function returned shape {logp.shape}, "
                    f"expected ({vocab_size},)"
                )
            for tok in range(vocab_size):
                total = lp + float(logp[tok])
                seq = prefix + [tok]
                if tok == eos:
                    gen = len(seq) - 1
                    completed.append(Hypothesis(
                        ids=np.asarray(seq), log_prob=total,
                        normalized_score=total / gen, order=counter,
                    ))
                    counter += 1
                else:
                    candidates.append((total, counter, seq))
                    counter += 1
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = [(seq, total) for total, _, seq in candidates[:beam]]
        if not live:
            break

    if not completed and live:
        for prefix, lp in live:
            logp = np.asarray(step_fn(prefix), dtype=np.float64)
            total = lp + float(logp[eos])
            seq = prefix + [eos]
            gen = len(seq) - 1
            completed.append(Hypothesis(
                ids=np.asarray(seq), log_prob=total,
                normalized_score=total / gen, forced=True, order=counter,
            ))
            counter += 1

    key = (lambda h: (-h.normalized_score, h.order)) if length_norm \
        else (lambda h: (-h.log_prob, h.order))
    return sorted(completed, key=key)


def greedy_decode(step_fn, *, vocab_size: int, max_len: int,
                  bos: int = BOS, eos: int = EOS) -> Hypothesis:
    return beam_search(step_fn, vocab_size=vocab_size, beam=1,
                       max_len=max_len, bos=bos, eos=eos)[0]


def model_step_fn(model, mem, visual_keys=None, draft=None):
    """Step function over a model's decoder (or second pass when a draft
    is supplied); runs outside the tape."""

    def step(prefix_ids):
        with no_grad():
            if draft is None:
                logits, _ = model.decode(prefix_ids, mem, visual_keys=visual_keys)
            else:
                logits = model.second_pass_decode(
                    prefix_ids, mem, draft, visual_keys=visual_keys
                )
            return log_softmax(logits[-1].reshape(1, -1), axis=-1).data[0]

    return step
