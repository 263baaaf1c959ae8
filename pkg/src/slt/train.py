"""Adam, dropout variants, the training loop, dev-set checkpoint selection,
pre-training transfer and the multi-task update schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .decode import greedy_decode_batch
from .metrics import bleu, wer
from .model import variational_dropout_mask  # noqa: F401  (re-export)
from .model import (Dropout, ModelConfig, Params, Seq2Seq, init_decoder, init_speech_encoder,
                    init_text_encoder, load_checkpoint, save_checkpoint)
from .text import EOS, RESERVED, UNK, Vocabulary, decode

log = logging.getLogger(__name__)

TASKS = ("ast", "asr", "mt")
SCHEDULE = ("ast", "asr", "ast", "mt", "ast")


@dataclass
class TrainConfig:
    batch_size: int = 32
    dropout: float = 0.2
    symbol_dropout: float = 0.2  # MT only
    max_source_len: int = 1400
    max_target_len: int = 300
    eval_interval: int = 1000
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "max_source_len", "max_target_len", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("dropout", "symbol_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamState":
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update of ``params`` in place, for the names in ``grads``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1, corr2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)).astype(p.dtype)


# ---------------------------------------------------------------- dropout


def symbol_dropout(ids: Sequence[int], p: float, rng: np.random.Generator) -> list[int]:
    """Replace each non-reserved id by UNK with probability ``p``."""
    ids = list(ids)
    draws = rng.random(len(ids))
    return [UNK if (i >= len(RESERVED) and u < p) else i for i, u in zip(ids, draws)]


# ---------------------------------------------------------------- batches


def truncate_source(source, max_len: int):
    return source[:max_len]


def truncate_target(ids: Sequence[int], max_len: int) -> list[int]:
    """Keep at most ``max_len`` ids; a cut sequence still ends in EOS."""
    ids = list(ids)
    if len(ids) <= max_len:
        return ids
    return ids[:max_len - 1] + [EOS]


def batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> Iterator[list[int]]:
    """Endless stream of index batches: bucketed by source length, batch order
    reshuffled every epoch."""
    order = sorted(range(len(lengths)), key=lambda j: (lengths[j], j))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    while True:
        for j in rng.permutation(len(chunks)):
            yield chunks[j]


def train_step(batch, model: Seq2Seq, task: str, config: TrainConfig, adam: AdamState,
               rng: np.random.Generator) -> float:
    """Forward with dropout, backward, one Adam update. Returns the mean
    per-symbol loss over non-PAD target positions."""
    if not batch:
        raise ValueError("empty batch")
    sources = [truncate_source(s, config.max_source_len) for s, _ in batch]
    targets = [truncate_target(t, config.max_target_len) for _, t in batch]
    dec_inputs = None
    if task == "mt" and config.symbol_dropout > 0:
        sources = [symbol_dropout(s, config.symbol_dropout, rng) for s in sources]
        dec_inputs = [symbol_dropout(t, config.symbol_dropout, rng) for t in targets]
    dropout = Dropout(config.dropout, rng)
    loss = model.loss(sources, targets, dropout, dec_inputs)
    names = model.parameter_names()
    grads = ad.gradients(loss, [model.params[n] for n in names])
    adam_step(model.params, dict(zip(names, grads)), adam)
    return float(loss.data)


# ---------------------------------------------------------------- evaluation


METRICS = {"ast": "BLEU", "mt": "BLEU", "asr": "WER"}


def evaluate(model: Seq2Seq, sources: list, references: list[str], vocab: Vocabulary,
             task: str, max_len: int = 300, batch_size: int = 64) -> tuple[str, float]:
    """Greedy-decode ``sources`` and score against ``references``."""
    hyps = []
    for i in range(0, len(sources), batch_size):
        out = greedy_decode_batch(model, sources[i:i + batch_size], max_len)
        hyps.extend(decode(o, vocab) for o in out)
    pairs = list(zip(hyps, references))
    if METRICS[task] == "BLEU":
        return "BLEU", bleu(pairs)
    return "WER", wer(pairs)


def select_checkpoint(history: Sequence[tuple[int, float]], metric: str = "BLEU") -> int:
    """Best step: highest BLEU or lowest WER; ties go to the earliest step."""
    if not history:
        raise ValueError("empty evaluation history")
    sign = 1.0 if metric.upper() == "BLEU" else -1.0
    best_step, best = history[0][0], sign * history[0][1]
    for step, value in history[1:]:
        if sign * value > best:
            best_step, best = step, sign * value
    return best_step


def schedule_task(step: int, schedule: Sequence[str] = SCHEDULE) -> str:
    """Task for a given update: cycle AST, ASR, AST, MT, AST (60/20/20)."""
    return schedule[step % len(schedule)]


# ---------------------------------------------------------------- transfer


class TransferError(ValueError):
    pass


def transfer(dst: Params, src: Params, mapping: dict[str, str]) -> list[str]:
    """Copy parameters between prefixes: ``mapping`` maps a destination prefix
    to a source prefix. Returns the destination names that were copied."""
    missing, mismatched, copied = [], [], []
    plan = []
    for name, p in dst.items():
        for dprefix, sprefix in mapping.items():
            if name.startswith(dprefix + "."):
                sname = sprefix + name[len(dprefix):]
                if sname not in src:
                    missing.append(sname)
                elif src[sname].shape != p.shape:
                    mismatched.append(f"{name} {p.shape} <- {sname} {src[sname].shape}")
                else:
                    plan.append((name, sname))
                break
    if missing or mismatched:
        msg = []
        if missing:
            msg.append("missing: " + ", ".join(missing))
        if mismatched:
            msg.append("shape mismatch: " + "; ".join(mismatched))
        raise TransferError("cannot transfer parameters (" + " | ".join(msg) + ")")
    for name, sname in plan:
        dst[name] = Tensor(src[sname].data.astype(dst[name].dtype, copy=True), requires_grad=True)
        copied.append(name)
    return copied


def _params(p) -> Params:
    return p if isinstance(p, dict) else load_checkpoint(p)


def init_from_pretrained(ast_params: Params, asr_ckpt, mt_ckpt) -> Params:
    """Speech encoder from the ASR model, decoder (attention and output layers
    included) from the MT model; everything else keeps its initialisation."""
    transfer(ast_params, _params(asr_ckpt), {"encoder": "encoder"})
    transfer(ast_params, _params(mt_ckpt), {"decoder": "decoder"})
    return ast_params


def multitask_views(params: Params, cfg: ModelConfig) -> dict[str, Seq2Seq]:
    """Task views over one shared store: AST and ASR share the speech encoder,
    AST and MT share the decoder."""
    return {
        "ast": Seq2Seq(params, cfg, "speech", "encoder", "decoder"),
        "asr": Seq2Seq(params, cfg, "speech", "encoder", "asr_decoder"),
        "mt": Seq2Seq(params, cfg, "text", "text_encoder", "decoder"),
    }


def build_multitask_params(cfg: ModelConfig, target_vocab: int, transcript_vocab: int,
                           source_vocab: int, seed: int = 0, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    init_speech_encoder(params, cfg, rng, dtype, prefix="encoder")
    init_decoder(params, cfg, target_vocab, rng, dtype, prefix="decoder")
    init_decoder(params, cfg, transcript_vocab, rng, dtype, prefix="asr_decoder")
    init_text_encoder(params, cfg, source_vocab, rng, dtype, prefix="text_encoder")
    return params


def init_multitask(params: Params, asr_ckpt, mt_ckpt) -> Params:
    asr, mt = _params(asr_ckpt), _params(mt_ckpt)
    transfer(params, asr, {"encoder": "encoder", "asr_decoder": "decoder"})
    transfer(params, mt, {"text_encoder": "encoder", "decoder": "decoder"})
    return params


# ---------------------------------------------------------------- loop


@dataclass
class TaskData:
    """Training pairs and dev set for one task."""

    train: list  # (source, target ids)
    dev_sources: list
    dev_refs: list[str]
    vocab: Vocabulary  # target vocabulary


@dataclass
class FitResult:
    history: dict[str, list[tuple[int, float]]]
    losses: list[float]
    best_step: int
    best_params: Params


def fit(models: dict[str, Seq2Seq], data: dict[str, TaskData], config: TrainConfig,
        n_updates: int, schedule: Callable[[int], str] | None = None,
        out_dir: Path | None = None, log_file=None, select_task: str | None = None,
        max_decode_len: int | None = None) -> FitResult:
    """Train for ``n_updates`` mini-batch updates.

    With one task, every update uses it; otherwise ``schedule`` picks the task
    per update. Every ``eval_interval`` updates each task is evaluated on its
    dev set, a log line is written and the best checkpoint (by
    ``select_task``'s metric) is kept.
    """
    tasks = list(models)
    if schedule is None:
        if len(tasks) != 1:
            raise ValueError("several tasks need a schedule")
        schedule = lambda step: tasks[0]  # noqa: E731
    select_task = select_task or tasks[0]
    rng = np.random.default_rng(config.seed)
    streams = {t: batches([len(s) for s, _ in data[t].train], config.batch_size, rng) for t in tasks}
    adam = {t: AdamState.from_config(config) for t in tasks}
    shared = next(iter(models.values())).params
    history: dict[str, list[tuple[int, float]]] = {t: [] for t in tasks}
    losses: list[float] = []
    best_step, best_params = 0, {k: Tensor(v.data.copy()) for k, v in shared.items()}
    max_len = max_decode_len or config.max_target_len
    for step in range(1, n_updates + 1):
        task = schedule(step - 1)
        idx = next(streams[task])
        batch = [data[task].train[j] for j in idx]
        losses.append(train_step(batch, models[task], task, config, adam[task], rng))
        if step % config.eval_interval:
            continue
        for t in tasks:
            name, value = evaluate(models[t], data[t].dev_sources, data[t].dev_refs,
                                   data[t].vocab, t, max_len)
            history[t].append((step, value))
            line = f"{step}\t{t}\t{name}\t{value:.4f}\n"
            log.info(line.strip())
            if log_file is not None:
                log_file.write(line)
                log_file.flush()
        sel = history[select_task]
        if select_checkpoint(sel, METRICS[select_task]) == step:
            prev_best = best_step
            best_step = step
            best_params = {k: Tensor(v.data.copy()) for k, v in shared.items()}
            if out_dir is not None:
                save_checkpoint(shared, Path(out_dir) / f"ckpt-{step}")
                old = Path(out_dir) / f"ckpt-{prev_best}"
                if prev_best and old.exists():
                    old.unlink()
    if out_dir is not None and best_step:
        (Path(out_dir) / "best").write_text(f"ckpt-{best_step}\n")
    return FitResult(history, losses, best_step, best_params)
