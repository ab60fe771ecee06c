"""Corpus BLEU-4 and paired-bootstrap significance.

BLEU is case-sensitive over pre-tokenized input (sequences of arbitrary
hashable tokens). Smoothing: add-one on orders 2-4, applied only when that
order's clipped match count is zero, so exact match stays exactly 100.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class BleuReport:
    score: float                 # [0, 100]
    precisions: tuple            # per-order effective precisions, n = 1..4
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self):
        p = "/".join(f"{x:.3f}" for x in self.precisions)
        return (f"BLEU = {self.score:.2f} (precisions {p}, "
                f"BP {self.brevity_penalty:.3f}, hyp {self.hyp_len}, "
                f"ref {self.ref_len})")


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses, references) -> BleuReport:
    """Corpus-level BLEU-4 with one reference per hypothesis."""
    if len(hypotheses) != len(references):
        raise ShapeError(
            f"hypothesis/reference line counts differ: "
            f"{len(hypotheses)} vs {len(references)}"
        )
    if len(hypotheses) == 0:
        raise ShapeError("BLEU over an empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hc = _ngrams(hyp, n)
            if not hc:
                continue
            rc = _ngrams(ref, n)
            totals[n - 1] += sum(hc.values())
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())

    if hyp_len == 0:
        return BleuReport(0.0, (0.0, 0.0, 0.0, 0.0), 0.0, 0, ref_len)

    precisions = []
    for n in range(4):
        m, t = matches[n], totals[n]
        if n >= 1 and m == 0:
            m, t = m + 1, t + 1    # add-one smoothing, orders 2-4 only
        precisions.append(m / t if t > 0 else 0.0)

    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / 4.0) * 100.0
    return BleuReport(score, tuple(precisions), bp, hyp_len, ref_len)


def paired_bootstrap(hyp_a, hyp_b, refs, samples: int = 1000,
                     seed: int = 0) -> float:
    """Probability that resampling flips (or ties) the corpus BLEU winner.

    Resamples sentence indices with replacement; p is the fraction of
    samples whose BLEU difference opposes or ties the full-corpus winner.
    Identical hypothesis lists return 1.0 by convention; so does a
    full-corpus tie between different lists.
    """
    if len(hyp_a) != len(hyp_b) or len(hyp_a) != len(refs):
        raise ShapeError(
            f"line counts differ: {len(hyp_a)} vs {len(hyp_b)} vs {len(refs)}"
        )
    hyp_a = [list(h) for h in hyp_a]
    hyp_b = [list(h) for h in hyp_b]
    refs = [list(r) for r in refs]
    if hyp_a == hyp_b:
        return 1.0
    full = bleu(hyp_a, refs).score - bleu(hyp_b, refs).score
    if full == 0.0:
        return 1.0
    sign = 1.0 if full > 0 else -1.0
    n = len(refs)
    children = np.random.SeedSequence(seed).spawn(samples)
    flips = 0
    for child in children:
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, size=n)
        da = bleu([hyp_a[i] for i in idx], [refs[i] for i in idx]).score
        db = bleu([hyp_b[i] for i in idx], [refs[i] for i in idx]).score
        if (da - db) * sign <= 0.0:
            flips += 1
    return flips / samples
