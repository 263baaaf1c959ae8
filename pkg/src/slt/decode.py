"""Greedy, beam and ensemble decoding, and the cascaded ASR -> MT pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import Seq2Seq
from .text import EOS, BpeModel, Vocabulary, bpe_sentence, decode, encode


@dataclass
class BeamConfig:
    width: int = 8
    max_len: int = 300
    alpha: float = 1.0  # length-normalisation exponent for the final ranking

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("beam width must be at least 1")


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float  # summed log-probability
    finished: bool = False

    def normalized(self, alpha: float) -> float:
        if alpha == 0 or not self.tokens:
            return self.score
        return self.score / len(self.tokens) ** alpha


class VocabularyMismatch(ValueError):
    pass


@dataclass
class _Scorer:
    """Per-step log-probabilities from one model or an ensemble.

    Ensembles average the per-model softmax distributions; a single model goes
    through the same arithmetic so that an ensemble of identical members is
    bit-for-bit the single model.
    """

    models: Sequence[Seq2Seq]
    states: list = field(default_factory=list)
    annotations: list = field(default_factory=list)

    def __post_init__(self):
        sizes = {m.target_vocab_size for m in self.models}
        if len(sizes) != 1:
            raise VocabularyMismatch(f"ensemble members disagree on vocabulary size: {sorted(sizes)}")

    def start(self, sources: list) -> None:
        self.annotations = [m.encode(sources) for m in self.models]
        self.states = [m.initial_state(len(sources)) for m in self.models]

    def reorder(self, index: np.ndarray) -> None:
        self.annotations = [a.select(index) for a in self.annotations]
        self.states = [s.select(index) for s in self.states]

    def step(self, prev_ids: np.ndarray) -> np.ndarray:
        probs = None
        for j, m in enumerate(self.models):
            self.states[j], z = m.step(self.states[j], self.annotations[j], prev_ids)
            p = np.exp(ad.log_softmax_np(z.data.astype(np.float64)))
            probs = p if probs is None else probs + p
        with np.errstate(divide="ignore"):
            return np.log(probs / len(self.models))


def _as_models(model) -> list[Seq2Seq]:
    return list(model) if isinstance(model, (list, tuple)) else [model]


def greedy_decode_batch(model, sources: list, max_len: int = 300) -> list[list[int]]:
    """Greedy decoding of several sources at once; each output ends at EOS or max_len."""
    scorer = _Scorer(_as_models(model))
    with ad.no_grad():
        scorer.start(list(sources))
        B = len(sources)
        prev = scorer.states[0].prev.copy()
        out: list[list[int]] = [[] for _ in range(B)]
        alive = np.ones(B, dtype=bool)
        for _ in range(max_len):
            logp = scorer.step(prev)
            prev = logp.argmax(axis=1)  # first maximum = lowest index
            for b in np.flatnonzero(alive):
                out[b].append(int(prev[b]))
                if prev[b] == EOS:
                    alive[b] = False
            if not alive.any():
                break
    return out


def greedy_decode(model, source, max_len: int = 300) -> list[int]:
    return greedy_decode_batch(model, [source], max_len)[0]


def beam_decode(model, source, config: BeamConfig = BeamConfig()) -> list[Hypothesis]:
    """Beam search returning finished and unfinished hypotheses, best first.

    Every step expands each live hypothesis over the whole vocabulary and keeps
    the ``width`` best candidates by summed log-probability (ties go to the
    earlier hypothesis, then the lower symbol id). Candidates ending in EOS are
    retired. The returned list is ranked by ``score / len**alpha``.
    """
    scorer = _Scorer(_as_models(model))
    finished: list[Hypothesis] = []
    with ad.no_grad():
        scorer.start([source])
        live = [Hypothesis([], 0.0)]
        prev = scorer.states[0].prev.copy()
        for _ in range(config.max_len):
            logp = scorer.step(prev)
            V = logp.shape[1]
            cand = (np.array([h.score for h in live])[:, None] + logp).reshape(-1)
            top = np.argsort(-cand, kind="stable")[:config.width]
            keep_rows, keep_syms, new_live = [], [], []
            for flat in top:
                row, sym = divmod(int(flat), V)
                if not np.isfinite(cand[flat]):
                    continue
                hyp = Hypothesis(live[row].tokens + [sym], float(cand[flat]))
                if sym == EOS:
                    hyp.finished = True
                    finished.append(hyp)
                else:
                    new_live.append(hyp)
                    keep_rows.append(row)
                    keep_syms.append(sym)
            live = new_live
            if not live:
                break
            scorer.reorder(np.array(keep_rows))
            prev = np.array(keep_syms, dtype=np.int64)
    results = finished + live
    order = sorted(range(len(results)), key=lambda j: (-results[j].normalized(config.alpha), j))
    return [results[j] for j in order]


def ensemble_decode(models: Sequence[Seq2Seq], source, config: BeamConfig = BeamConfig()) -> list[int]:
    """Beam search over the arithmetic mean of the members' distributions."""
    return beam_decode(list(models), source, config)[0].tokens


def nbest_lines(utt_id: str, hyps: list[Hypothesis], vocab: Vocabulary) -> list[str]:
    return [f"{utt_id} ||| {r} ||| {h.score:.4f} ||| {decode(h.tokens, vocab)}"
            for r, h in enumerate(hyps)]


def cascade_translate(asr_model, mt_model, features, bpe: BpeModel, config: BeamConfig,
                      asr_vocab: Vocabulary, mt_source_vocab: Vocabulary,
                      target_vocab: Vocabulary) -> str:
    """Transcribe with the ASR model, re-segment into subwords, translate with MT.

    An empty transcript becomes a lone EOS source, for which the MT model's
    greedy continuation is returned.
    """
    transcript = decode(beam_decode(asr_model, features, config)[0].tokens, asr_vocab)
    src_ids = encode(bpe_sentence(transcript, bpe), mt_source_vocab)
    if len(src_ids) == 1:
        return decode(greedy_decode(mt_model, src_ids, config.max_len), target_vocab)
    return decode(beam_decode(mt_model, src_ids, config)[0].tokens, target_vocab)
