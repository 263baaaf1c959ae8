"""Parallel corpus ingestion and the synthetic toy corpus."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import FeatureMatrix, PcmSignal, compute_features, write_feature_cache, write_wav


class CorpusError(ValueError):
    pass


@dataclass
class ParallelCorpus:
    """Aligned (source, target text, utterance id) triples.

    Sources are feature matrices for speech or normalised token strings for text.
    """

    sources: list = field(default_factory=list)
    targets: list[str] = field(default_factory=list)
    utt_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not len(self.sources) == len(self.targets) == len(self.utt_ids):
            raise CorpusError("sources, targets and ids differ in length")
        if len(set(self.utt_ids)) != len(self.utt_ids):
            raise CorpusError("utterance ids are not unique")

    def __len__(self) -> int:
        return len(self.sources)


def read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def write_lines(path, lines: Sequence[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_corpus(source_path, target_paths, features: dict[str, FeatureMatrix] | None = None,
                ids_path=None) -> ParallelCorpus:
    """Read one source file and k parallel reference files.

    With ``features`` the source file lists utterance ids resolved against the
    feature cache; otherwise it holds one tokenised sentence per line. With k
    reference files each source appears k times, grouped by reference file.
    """
    if isinstance(target_paths, (str, Path)):
        target_paths = [target_paths]
    if not target_paths:
        raise CorpusError("at least one target file is needed")
    src_lines = read_lines(source_path)
    ids = read_lines(ids_path) if ids_path is not None else None
    if features is not None:
        missing = [u for u in src_lines if u not in features]
        if missing:
            raise CorpusError(f"{len(missing)} utterance ids missing from the feature cache, e.g. {missing[0]}")
        sources = [features[u].frames for u in src_lines]
        base_ids = src_lines
    else:
        sources = src_lines
        base_ids = ids if ids is not None else [f"{j:06d}" for j in range(len(src_lines))]
    if len(base_ids) != len(sources):
        raise CorpusError(f"id file has {len(base_ids)} lines, source has {len(sources)}")
    out = ParallelCorpus()
    k = len(target_paths)
    for r, path in enumerate(target_paths):
        tgt = read_lines(path)
        if len(tgt) != len(sources):
            raise CorpusError(f"{path}: {len(tgt)} lines, source has {len(sources)}")
        out.sources.extend(sources)
        out.targets.extend(tgt)
        out.utt_ids.extend(base_ids if k == 1 else [f"{u}#{r}" for u in base_ids])
    out.__post_init__()
    return out


# ---------------------------------------------------------------- toy corpus

# a small source language with a word-for-word "translation"
TOY_LEXICON = {
    "one": "un", "two": "deux", "red": "rouge", "blue": "bleu", "cat": "chat",
    "dog": "chien", "big": "gros", "sun": "soleil", "sea": "mer", "old": "vieux",
}

TOY_CHAR_MS = 40
TOY_GAP_MS = 30
TOY_RATE = 16000


def tone_frequency(ch: str) -> float:
    """Pitch of a letter: steps of 230 Hz from 300 Hz, wrapped into 300-6000 Hz."""
    k = ord(ch) - ord("a")
    return 300.0 + (k * 230.0) % 5700.0


def synthesize(text: str, rng: np.random.Generator, rate: int = TOY_RATE) -> PcmSignal:
    """Tone-coded speech: one short sine per letter, silence between words,
    plus a little noise."""
    n_char = rate * TOY_CHAR_MS // 1000
    n_gap = rate * TOY_GAP_MS // 1000
    ramp = np.minimum(1.0, np.minimum(np.arange(n_char), np.arange(n_char)[::-1]) / (0.1 * n_char))
    parts = [np.zeros(n_gap)]
    t = np.arange(n_char) / rate
    for ch in text:
        if ch == " ":
            parts.append(np.zeros(n_gap))
        else:
            parts.append(0.5 * ramp * np.sin(2 * np.pi * tone_frequency(ch) * t))
    parts.append(np.zeros(n_gap))
    x = np.concatenate(parts)
    x += 0.01 * rng.standard_normal(len(x))
    # quantise as a 16-bit WAV would, so features from the files match the cache
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767)
    return PcmSignal(pcm / 32768.0, rate)


def toy_sentences(n: int, rng: np.random.Generator, min_words: int = 4,
                  max_words: int = 6) -> list[tuple[str, str]]:
    # at least four words, so every sentence contributes 4-grams to BLEU
    words = sorted(TOY_LEXICON)
    out = []
    for _ in range(n):
        k = int(rng.integers(min_words, max_words + 1))
        src = [words[int(j)] for j in rng.integers(0, len(words), size=k)]
        out.append((" ".join(src), " ".join(TOY_LEXICON[w] for w in src)))
    return out


def make_toy_corpus(out_dir, n_train: int = 50, n_dev: int = 20, n_test: int = 20,
                    seed: int = 0, write_audio: bool = True) -> dict[str, int]:
    """Write WAVs, a feature cache and per-split .ids/.src/.tgt files.

    ``.src`` holds the source-language transcript (ASR targets and MT sources),
    ``.tgt`` the translation (AST and MT targets).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    feats = []
    sizes = {"train": n_train, "dev": n_dev, "test": n_test}
    for split, n in sizes.items():
        pairs = toy_sentences(n, rng)
        ids = [f"{split}{j:04d}" for j in range(n)]
        for utt, (src, _) in zip(ids, pairs):
            sig = synthesize(src, rng)
            if write_audio:
                (out / "wav").mkdir(exist_ok=True)
                write_wav(out / "wav" / f"{utt}.wav", sig)
            feats.append(compute_features(sig, utt_id=utt))
        write_lines(out / f"{split}.ids", ids)
        write_lines(out / f"{split}.src", [s for s, _ in pairs])
        write_lines(out / f"{split}.tgt", [t for _, t in pairs])
    write_feature_cache(out / "features.sltf", feats)
    return sizes
