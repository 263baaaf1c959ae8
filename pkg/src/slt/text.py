"""Text normalisation, vocabularies and byte-pair-encoding subwords."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
EOW = "</w>"

# typographic punctuation folded to ASCII before tokenisation
_PUNCT_MAP = str.maketrans({
    "‘": "'", "’": "'", "‚": "'", "‛": "'",
    "“": '"', "”": '"', "„": '"', "«": '"', "»": '"',
    "\u2013": "-", "\u2014": "-", "−": "-",
    "\u00a0": " ", "\u2009": " ", "\u202f": " ",
})
_ELLIPSIS = "…"
_PUNCT_RE = re.compile("([" + re.escape(string.punctuation) + "])")


def normalize(text: str) -> str:
    """Lowercase, fold typographic punctuation to ASCII, split every ASCII
    punctuation mark into its own token and collapse whitespace.

    >>> normalize("Hello, World!")
    'hello , world !'
    """
    text = text.replace(_ELLIPSIS, "...").translate(_PUNCT_MAP).lower()
    text = _PUNCT_RE.sub(r" \1 ", text)
    return " ".join(text.split())


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.symbols[:4]) != RESERVED:
            raise VocabularyError("vocabulary must start with the reserved symbols")
        index = {s: i for i, s in enumerate(self.symbols)}
        if len(index) != len(self.symbols):
            raise VocabularyError("duplicate symbol in vocabulary")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, sym: str) -> bool:
        return sym in self.index

    def id(self, sym: str) -> int:
        return self.index.get(sym, UNK)

    def save(self, path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def _ranked(counts: Counter) -> list[str]:
    return sorted(counts, key=lambda s: (-counts[s], s))


def build_char_vocab(lines: Iterable[str]) -> Vocabulary:
    """Character vocabulary ordered by descending frequency, then codepoint."""
    counts: Counter = Counter()
    seen_line = False
    for line in lines:
        seen_line = True
        counts.update(line)
    if not seen_line or not counts:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(RESERVED + tuple(_ranked(counts)))


def build_token_vocab(sequences: Iterable[Sequence[str]]) -> Vocabulary:
    """Vocabulary over whole tokens (words or subwords), same ordering rule."""
    counts: Counter = Counter()
    for seq in sequences:
        counts.update(seq)
    if not counts:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(RESERVED + tuple(_ranked(counts)))


def encode(text: str | Sequence[str], vocab: Vocabulary) -> list[int]:
    """Map symbols to ids, unknown symbols to UNK, and append EOS.

    A string is split into characters; a list is taken as a token sequence.
    """
    return [vocab.id(s) for s in text] + [EOS]


def decode(ids: Iterable[int], vocab: Vocabulary, sep: str = "") -> str:
    """Inverse of :func:`encode`: reserved ids are dropped, decoding stops at EOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i < len(RESERVED) or i >= len(vocab):
            continue
        out.append(vocab.symbols[i])
    return sep.join(out)


# ---------------------------------------------------------------- BPE


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...]
    ranks: dict[tuple[str, str], int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "ranks", {pair: r for r, pair in enumerate(self.merges)})

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(tuple(merges))


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Iterable[str], n_merges: int) -> BpeModel:
    """Greedy pair merging over the whitespace-separated words of ``corpus``.

    Each round merges the most frequent adjacent symbol pair (ties go to the
    lexicographically smallest pair) and stops early once no pair occurs at
    least twice.
    """
    if n_merges < 0:
        raise ValueError("n_merges must be non-negative")
    words: Counter = Counter()
    for line in corpus:
        words.update(line.split())
    vocab = {_word_symbols(w): c for w, c in words.items()}
    merges: list[tuple[str, str]] = []
    while len(merges) < n_merges:
        pairs: Counter = Counter()
        for syms, c in vocab.items():
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += c
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        if pairs[best] < 2:
            break
        merges.append(best)
        vocab = {(_merge_word(s, best) if best[0] in s else s): c for s, c in vocab.items()}
    return BpeModel(tuple(merges))


def apply_bpe(word: str, model: BpeModel) -> list[str]:
    """Segment one word; the last subword carries the end-of-word marker."""
    if not word:
        return []
    syms = _word_symbols(word)
    ranks = model.ranks
    while len(syms) > 1:
        candidates = [ranks[p] for p in zip(syms, syms[1:]) if p in ranks]
        if not candidates:
            break
        syms = _merge_word(syms, model.merges[min(candidates)])
    return list(syms)


def bpe_sentence(text: str, model: BpeModel) -> list[str]:
    return [sub for w in text.split() for sub in apply_bpe(w, model)]


def unbpe(subwords: Sequence[str]) -> str:
    words, cur = [], ""
    for s in subwords:
        if s.endswith(EOW):
            words.append(cur + s[:-len(EOW)])
            cur = ""
        else:
            cur += s
    if cur:
        words.append(cur)
    return " ".join(words)

