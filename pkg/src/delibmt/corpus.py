"""Vocabulary construction and the source-degradation strategies.

Reserved ids 0..4 are PAD, BOS, EOS, UNK, BLANK. The blank's surface form
is the literal token "BLANK" so degraded text files round-trip through
encode/decode; corpus words equal to a reserved surface never receive a
regular id.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import DegradeError, FormatError, ShapeError, VocabularyError

PAD, BOS, EOS, UNK, BLANK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "BLANK")
CONTENT_TAGS = frozenset({"NOUN", "VERB", "ADJ", "ADV"})
PRONOUN_AUGMENT = ("he", "she", "her", "his")
STRATEGIES = ("RND", "AMB", "PERS")


class Vocabulary:
    """token <-> id maps with the five reserved entries."""

    def __init__(self, tokens: list[str], min_freq: int = 1):
        self.min_freq = min_freq
        self.id_to_token: list[str] = list(RESERVED) + list(tokens)
        self.token_to_id: dict[str, int] = {
            t: i for i, t in enumerate(self.id_to_token)
        }
        if len(self.token_to_id) != len(self.id_to_token):
            dupes = [t for t, c in Counter(self.id_to_token).items() if c > 1]
            raise VocabularyError(f"duplicate vocabulary entries: {dupes}")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens) -> np.ndarray:
        return np.asarray(
            [self.token_to_id.get(t, UNK) for t in tokens], dtype=np.int64
        )

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.id_to_token):
                raise VocabularyError(f"id {i} out of range for vocabulary of {len(self)}")
            out.append(self.id_to_token[i])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#min_freq={self.min_freq}\n")
            for t in self.id_to_token[len(RESERVED):]:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        min_freq = 1
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("#min_freq="):
                    min_freq = int(line.split("=", 1)[1])
                elif line:
                    tokens.append(line)
        return cls(tokens, min_freq=min_freq)


def build_vocab(lines, min_freq: int = 1) -> Vocabulary:
    """Frequency-cutoff vocabulary; ids ordered by count desc, then token.

    `lines` is an iterable of token lists (or whitespace-splittable strings).
    """
    counts: Counter = Counter()
    empty = True
    for line in lines:
        empty = False
        tokens = line.split() if isinstance(line, str) else line
        counts.update(tokens)
    if empty:
        raise ShapeError("cannot build a vocabulary from an empty corpus")
    for r in RESERVED:
        counts.pop(r, None)
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(kept, min_freq=min_freq)


# ------------------------------------------------------------------ lexicons


class PosLexicon:
    """word -> POS-tag set; lookups are case-folded."""

    def __init__(self, entries: dict[str, set[str]]):
        self.entries = {w.casefold(): set(tags) for w, tags in entries.items()}

    def tags(self, word: str) -> set[str]:
        return self.entries.get(word.casefold(), set())

    def is_content(self, word: str) -> bool:
        return bool(self.tags(word) & CONTENT_TAGS)

    @classmethod
    def load(cls, path) -> "PosLexicon":
        entries: dict[str, set[str]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise FormatError(
                        f"{path}: line {lineno + 1} is not 'word<TAB>TAG[,TAG...]'"
                    )
                entries.setdefault(parts[0], set()).update(
                    t.strip() for t in parts[1].split(",") if t.strip()
                )
        return cls(entries)


def load_word_list(path) -> set[str]:
    """One entry per line, case-folded."""
    out = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            word = line.strip()
            if word and not word.startswith("#"):
                out.add(word.casefold())
    return out


# ---------------------------------------------------------------- degradation


@dataclass
class DegradedSentence:
    tokens: list[str]
    masked_positions: list[int]
    originals: list[str]
    strategy: str

    def __post_init__(self):
        if len(self.masked_positions) != len(self.originals):
            raise ShapeError("masked_positions and originals lengths differ")
        for p in self.masked_positions:
            if self.tokens[p] != "BLANK":
                raise ShapeError(f"position {p} recorded as masked but is not BLANK")


def degrade(tokens, strategy: str, *, lexicon: PosLexicon | None = None,
            word_list: set[str] | None = None, rate: float = 0.15,
            rng: np.random.Generator | None = None) -> DegradedSentence:
    """Mask source words with BLANK.

    RND: each content word (per the lexicon) masked independently with
    probability `rate` under the given generator. AMB/PERS: deterministic,
    every listed word masked (case-insensitive surface match); PERS also
    masks the gender-marked pronouns he/she/her/his.
    """
    if strategy not in STRATEGIES:
        raise DegradeError(f"unknown degradation strategy {strategy!r}")
    tokens = list(tokens.split()) if isinstance(tokens, str) else list(tokens)
    out = list(tokens)
    positions: list[int] = []
    originals: list[str] = []

    if strategy == "RND":
        if lexicon is None:
            raise DegradeError("RND degradation requires a POS lexicon")
        if rng is None:
            rng = np.random.default_rng(0)
        for i, tok in enumerate(tokens):
            if tok == "BLANK" or not lexicon.is_content(tok):
                continue
            if rng.random() < rate:
                positions.append(i)
                originals.append(tok)
                out[i] = "BLANK"
    else:
        if word_list is None:
            raise DegradeError(f"{strategy} degradation requires a word list")
        targets = {w.casefold() for w in word_list}
        if strategy == "PERS":
            targets.update(PRONOUN_AUGMENT)
        for i, tok in enumerate(tokens):
            if tok != "BLANK" and tok.casefold() in targets:
                positions.append(i)
                originals.append(tok)
                out[i] = "BLANK"

    return DegradedSentence(out, positions, originals, strategy)


@dataclass
class DegradationStats:
    sentences: int
    sentences_with_blank: int
    total_blanks: int

    @property
    def pct_sentences(self) -> float:
        if self.sentences == 0:
            return 0.0
        return 100.0 * self.sentences_with_blank / self.sentences

    @property
    def avg_blanks(self) -> float:
        """Mean blanks over sentences with at least one blank (0 if none)."""
        if self.sentences_with_blank == 0:
            return 0.0
        return self.total_blanks / self.sentences_with_blank


@dataclass
class DegradedCorpus:
    sentences: list[DegradedSentence]
    stats: DegradationStats

    def lines(self) -> list[str]:
        return [" ".join(s.tokens) for s in self.sentences]

    def audit_lines(self) -> list[str]:
        out = []
        for i, s in enumerate(self.sentences):
            for pos, orig in zip(s.masked_positions, s.originals):
                out.append(f"{i}\t{pos}\t{orig}")
        return out


def degrade_corpus(lines, strategy: str, *, lexicon=None, word_list=None,
                   rate: float = 0.15, seed: int = 0) -> DegradedCorpus:
    """Apply `degrade` per line with per-line derived seeds (seed XOR index)."""
    sentences = []
    with_blank = 0
    total = 0
    for i, line in enumerate(lines):
        rng = np.random.default_rng(seed ^ i)
        ds = degrade(line, strategy, lexicon=lexicon, word_list=word_list,
                     rate=rate, rng=rng)
        sentences.append(ds)
        if ds.masked_positions:
            with_blank += 1
            total += len(ds.masked_positions)
    stats = DegradationStats(len(sentences), with_blank, total)
    return DegradedCorpus(sentences, stats)


def corpus_blank_stats(lines) -> DegradationStats:
    """Stats straight from degraded text (counting BLANK tokens)."""
    sentences = 0
    with_blank = 0
    total = 0
    for line in lines:
        tokens = line.split() if isinstance(line, str) else list(line)
        sentences += 1
        k = sum(1 for t in tokens if t == "BLANK")
        if k:
            with_blank += 1
            total += k
    return DegradationStats(sentences, with_blank, total)


# ------------------------------------------------------- ambiguity mining


def extract_ambiguous(src_lines, tgt_lines, min_count: int = 10,
                      min_ratio: float = 0.2, iterations: int = 5) -> list[str]:
    """Mine source words with multiple likely translations.

    Builds a lexical translation table t(target | source) with IBM-1 style
    EM over co-occurrences (no NULL word); a source word is ambiguous iff
    at least two distinct target words reach t >= min_ratio and the source
    word occurs at least min_count times.
    """
    pairs = []
    src_count: Counter = Counter()
    for s, t in zip(src_lines, tgt_lines):
        s = s.split() if isinstance(s, str) else list(s)
        t = t.split() if isinstance(t, str) else list(t)
        if s and t:
            pairs.append((s, t))
            src_count.update(s)
    if not pairs:
        raise ShapeError("cannot mine an empty bitext")

    # t(f|e), initialized uniform over co-occurring pairs
    table: dict[str, dict[str, float]] = defaultdict(dict)
    for s, t in pairs:
        for e in set(s):
            for f in set(t):
                table[e][f] = 1.0
    for e, row in table.items():
        u = 1.0 / len(row)
        for f in row:
            row[f] = u

    for _ in range(iterations):
        counts: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
        for s, t in pairs:
            for f in t:
                z = sum(table[e][f] for e in s)
                if z <= 0.0:
                    continue
                for e in s:
                    counts[e][f] += table[e][f] / z
        for e, row in counts.items():
            z = sum(row.values())
            for f, c in row.items():
                table[e][f] = c / z

    ambiguous = []
    for e, row in table.items():
        if src_count[e] < min_count:
            continue
        strong = [f for f, p in row.items() if p >= min_ratio]
        if len(strong) >= 2:
            ambiguous.append(e)
    return sorted(ambiguous)


# --------------------------------------------------------------- text io


def read_token_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split() for line in fh]


def write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write((" ".join(line) if not isinstance(line, str) else line) + "\n")


def read_bitext(src_path, tgt_path) -> tuple[list[list[str]], list[list[str]]]:
    src = read_token_lines(src_path)
    tgt = read_token_lines(tgt_path)
    if len(src) != len(tgt):
        raise FormatError(
            f"bitext line counts differ: {src_path} has {len(src)}, "
            f"{tgt_path} has {len(tgt)}"
        )
    return src, tgt
