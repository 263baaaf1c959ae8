"""Corpus BLEU and word error rate."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .text import normalize


@dataclass
class EvalPair:
    hypothesis: str
    reference: str


@dataclass
class BleuResult:
    score: float
    precisions: list[float]
    matches: list[int]
    totals: list[int]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def breakdown(self) -> str:
        rows = [("bleu", f"{self.score:.4f}")]
        for n, (p, m, t) in enumerate(zip(self.precisions, self.matches, self.totals), 1):
            rows.append((f"p{n}", f"{p:.6f}\t{m}\t{t}"))
        rows += [("bp", f"{self.brevity_penalty:.6f}"), ("hyp_len", str(self.hyp_len)),
                 ("ref_len", str(self.ref_len))]
        return "".join(f"{k}\t{v}\n" for k, v in rows)


@dataclass
class WerResult:
    score: float
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    def breakdown(self) -> str:
        rows = [("wer", f"{self.score:.4f}"), ("sub", self.substitutions),
                ("ins", self.insertions), ("del", self.deletions), ("ref_words", self.ref_words)]
        return "".join(f"{k}\t{v}\n" for k, v in rows)


class EmptyCorpusError(ValueError):
    pass


def _tokens(text: str) -> list[str]:
    return normalize(text).split()


def _as_pairs(pairs) -> list[EvalPair]:
    return [p if isinstance(p, EvalPair) else EvalPair(*p) for p in pairs]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_details(pairs: Iterable, max_order: int = 4) -> BleuResult:
    """Corpus-level BLEU over normalised whitespace tokens, no smoothing."""
    pairs = _as_pairs(pairs)
    if not pairs:
        raise EmptyCorpusError("BLEU needs at least one sentence pair")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for p in pairs:
        hyp, ref = _tokens(p.hypothesis), _tokens(p.reference)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len) if hyp_len else 0.0
    if min(matches) == 0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuResult(score, precisions, matches, totals, bp, hyp_len, ref_len)


def bleu(pairs: Iterable) -> float:
    return bleu_details(pairs).score


def sentence_bleu(hypothesis: str, reference: str, max_order: int = 4) -> float:
    """Add-one smoothed sentence BLEU (orders > 1), for diagnostics only."""
    hyp, ref = _tokens(hypothesis), _tokens(reference)
    if not hyp:
        return 0.0
    logs = 0.0
    for n in range(1, max_order + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        m = sum(min(c, r[g]) for g, c in h.items())
        t = max(len(hyp) - n + 1, 0)
        if n > 1:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        logs += math.log(m / t)
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return 100.0 * bp * math.exp(logs / max_order)


@dataclass
class EditCounts:
    distance: int
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ops: list[str] = field(default_factory=list, repr=False)


def levenshtein(a: Sequence, b: Sequence) -> EditCounts:
    """Unit-cost edit distance turning reference ``a`` into hypothesis ``b``.

    Insertions are tokens only in ``b``, deletions tokens only in ``a``.
    """
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            row[j] = min(prev[j - 1] + cost, prev[j] + 1, row[j - 1] + 1)
    # backtrace, preferring matches/substitutions
    i, j = n, m
    counts = EditCounts(d[n][m])
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (a[i - 1] != b[j - 1]):
            op = "=" if a[i - 1] == b[j - 1] else "S"
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            op = "D"
            i -= 1
        else:
            op = "I"
            j -= 1
        counts.ops.append(op)
    counts.ops.reverse()
    counts.substitutions = counts.ops.count("S")
    counts.insertions = counts.ops.count("I")
    counts.deletions = counts.ops.count("D")
    return counts


def wer_details(pairs: Iterable) -> WerResult:
    pairs = _as_pairs(pairs)
    sub = ins = dele = words = 0
    for p in pairs:
        ref, hyp = _tokens(p.reference), _tokens(p.hypothesis)
        e = levenshtein(ref, hyp)
        sub, ins, dele = sub + e.substitutions, ins + e.insertions, dele + e.deletions
        words += len(ref)
    if words == 0:
        raise EmptyCorpusError("WER needs at least one reference word")
    return WerResult(100.0 * (sub + ins + dele) / words, sub, ins, dele, words)


def wer(pairs: Iterable) -> float:
    return wer_details(pairs).score
