"""Experiment configuration and the training regimes behind ``slt train``."""

from __future__ import annotations

import logging
import typing
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .audio import read_feature_cache
from .corpus import ParallelCorpus, load_corpus, read_lines
from .model import (ModelConfig, Params, Seq2Seq, TASK_ENCODERS, build_params, load_checkpoint,
                    save_checkpoint)
from .text import (BpeModel, Vocabulary, bpe_sentence, build_char_vocab, build_token_vocab, encode,
                   learn_bpe, normalize)
from .train import (FitResult, TaskData, TrainConfig, build_multitask_params, fit,
                    init_from_pretrained, init_multitask, multitask_views, schedule_task)

log = logging.getLogger(__name__)

REGIMES = ("end2end", "pretrained", "multitask", "cascaded")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything ``slt train`` needs. Model sizes default to the LibriSpeech
    setup; the toy corpus generator writes a much smaller configuration."""

    task: str = "ast"
    regime: str = "end2end"
    out_dir: str = "exp"
    # corpus
    features: str = ""
    train_ids: str = ""
    dev_ids: str = ""
    train_src: str = ""  # source-language transcripts (ASR targets, MT sources)
    dev_src: str = ""
    train_tgt: str = ""  # translations; comma-separated files duplicate the source side
    dev_tgt: str = ""
    bpe_merges: int = 1000
    # model
    n_features: int = 41
    input_sizes: tuple[int, ...] = (256, 128)
    conv_filters: int = 16
    speech_layers: int = 3
    encoder_cell: int = 256
    text_embed: int = 256
    decoder_cell: int = 512
    target_embed: int = 128
    output_size: int = 512
    attention_size: int = 0
    # training
    batch_size: int = 32
    dropout: float = 0.2
    symbol_dropout: float = 0.2
    max_source_len: int = 1400
    max_target_len: int = 300
    eval_interval: int = 1000
    learning_rate: float = 0.001
    updates: int = 10000
    pretrain_updates: int = 0  # ASR/MT stages of pretrained, multitask and cascaded; 0 = updates
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n_features, tuple(self.input_sizes), self.conv_filters,
                           self.speech_layers, self.encoder_cell, self.text_embed,
                           self.decoder_cell, self.target_embed, self.output_size,
                           self.attention_size)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.dropout, self.symbol_dropout, self.max_source_len,
                           self.max_target_len, self.eval_interval, self.learning_rate,
                           seed=self.seed)

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        if self.task not in TASK_ENCODERS:
            raise ConfigError(f"task must be one of asr, mt, ast (got {self.task!r})")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {', '.join(REGIMES)} (got {self.regime!r})")
        if self.task != "ast" and self.regime != "end2end":
            raise ConfigError(f"regime {self.regime} only applies to task ast")
        if len(self.input_sizes) != 2:
            raise ConfigError("input_sizes needs two values")
        if self.updates <= 0 or self.pretrain_updates < 0:
            raise ConfigError("updates must be positive")
        try:
            self.model_config()
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if check_paths:
            for name in self.required_paths():
                for p in getattr(self, name).split(","):
                    if not p or not Path(p).exists():
                        raise ConfigError(f"{name}: file not found: {p!r}")
        return self

    def required_paths(self) -> list[str]:
        speech = self.task in ("asr", "ast")
        text = self.task == "mt" or self.regime != "end2end"
        names = []
        if speech:
            names += ["features", "train_ids", "dev_ids"]
        if self.task == "asr" or text:
            names += ["train_src", "dev_src"]
        if self.task in ("ast", "mt"):
            names += ["train_tgt", "dev_tgt"]
        return names


# ---------------------------------------------------------------- config files


def _hints():
    return typing.get_type_hints(ExperimentConfig)


def _convert(name: str, raw: str, hint):
    try:
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse "key = value" lines ("#" starts a comment); ``overrides`` win."""
    hints = _hints()
    values: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = raw
    values.update(overrides or {})
    kwargs = {}
    for key, raw in values.items():
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _convert(key, raw, hints[key])
    return ExperimentConfig(**kwargs)


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, overrides)


# ---------------------------------------------------------------- resources


@dataclass
class Resources:
    """Vocabularies, subword model and encoded data for every task."""

    transcript_vocab: Vocabulary | None
    target_vocab: Vocabulary | None
    bpe: BpeModel | None
    source_vocab: Vocabulary | None
    data: dict[str, TaskData]

    def save(self, out: Path) -> None:
        if self.transcript_vocab:
            self.transcript_vocab.save(out / "transcript.vocab")
        if self.target_vocab:
            self.target_vocab.save(out / "target.vocab")
        if self.bpe:
            self.bpe.save(out / "bpe.codes")
            self.source_vocab.save(out / "source.vocab")


def _text_corpus(src: str, tgt: str) -> ParallelCorpus:
    return load_corpus(src, tgt.split(","))


def prepare(cfg: ExperimentConfig, tasks: list[str]) -> Resources:
    features = read_feature_cache(cfg.features) if cfg.features and {"asr", "ast"} & set(tasks) else None
    data: dict[str, TaskData] = {}
    tv = sv = bpe = tr_v = None

    if "asr" in tasks:
        tr = load_corpus(cfg.train_ids, cfg.train_src, features=features)
        dev = load_corpus(cfg.dev_ids, cfg.dev_src, features=features)
        texts = [normalize(t) for t in tr.targets]
        tr_v = build_char_vocab(texts)
        data["asr"] = TaskData([(s, encode(t, tr_v)) for s, t in zip(tr.sources, texts)],
                               dev.sources, [normalize(t) for t in dev.targets], tr_v)
    if "ast" in tasks or "mt" in tasks:
        tgt_lines = [normalize(t) for p in cfg.train_tgt.split(",") for t in read_lines(p)]
        tv = build_char_vocab(tgt_lines)
    if "ast" in tasks:
        tr = load_corpus(cfg.train_ids, cfg.train_tgt.split(","), features=features)
        dev = load_corpus(cfg.dev_ids, cfg.dev_tgt.split(",")[:1], features=features)
        data["ast"] = TaskData([(s, encode(normalize(t), tv)) for s, t in zip(tr.sources, tr.targets)],
                               dev.sources, [normalize(t) for t in dev.targets], tv)
    if "mt" in tasks:
        tr = _text_corpus(cfg.train_src, cfg.train_tgt)
        dev = load_corpus(cfg.dev_src, cfg.dev_tgt.split(",")[:1])
        bpe = learn_bpe([normalize(s) for s in read_lines(cfg.train_src)], cfg.bpe_merges)
        seg = [bpe_sentence(normalize(s), bpe) for s in tr.sources]
        sv = build_token_vocab(seg)
        data["mt"] = TaskData(
            [(encode(s, sv), encode(normalize(t), tv)) for s, t in zip(seg, tr.targets)],
            [encode(bpe_sentence(normalize(s), bpe), sv) for s in dev.sources],
            [normalize(t) for t in dev.targets], tv)
    return Resources(tr_v, tv, bpe, sv, data)


# ---------------------------------------------------------------- regimes


def _vocab_sizes(res: Resources, task: str) -> tuple[int, int]:
    if task == "asr":
        return len(res.transcript_vocab), 0
    if task == "mt":
        return len(res.target_vocab), len(res.source_vocab)
    return len(res.target_vocab), 0


def _stage(task: str, params: Params, cfg: ExperimentConfig, res: Resources, n_updates: int,
           out: Path, log_file) -> FitResult:
    (out / task).mkdir(parents=True, exist_ok=True)
    model = Seq2Seq(params, cfg.model_config(), TASK_ENCODERS[task])
    result = fit({task: model}, {task: res.data[task]}, cfg.train_config(), n_updates,
                 out_dir=out / task, log_file=log_file, max_decode_len=cfg.max_target_len)
    _finish(out / task, params, result, n_updates)
    return result


def _finish(stage_dir: Path, params: Params, result: FitResult, n_updates: int) -> None:
    save_checkpoint(params, stage_dir / f"ckpt-{n_updates}")
    if not result.best_step:  # no evaluation happened: the last state is the best
        (stage_dir / "best").write_text(f"ckpt-{n_updates}\n")


def best_checkpoint(stage_dir) -> Path:
    stage_dir = Path(stage_dir)
    return stage_dir / (stage_dir / "best").read_text().strip()


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Run the configured task/regime; returns the best final checkpoint path."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    mc = cfg.model_config()
    if cfg.task != "ast":
        tasks = [cfg.task]
    elif cfg.regime == "end2end":
        tasks = ["ast"]
    elif cfg.regime == "cascaded":
        tasks = ["asr", "mt"]
    else:
        tasks = ["asr", "mt", "ast"]
    res = prepare(cfg, tasks)
    res.save(out)
    pre_updates = cfg.pretrain_updates or cfg.updates

    with open(out / "train.log", "w", encoding="utf-8") as log_file:
        if cfg.task != "ast" or cfg.regime == "end2end":
            t = tasks[0]
            params = build_params(t, mc, *_vocab_sizes(res, t), seed=cfg.seed)
            _stage(t, params, cfg, res, cfg.updates, out, log_file)
            return best_checkpoint(out / t)

        for t in ("asr", "mt"):
            params = build_params(t, mc, *_vocab_sizes(res, t), seed=cfg.seed)
            _stage(t, params, cfg, res, pre_updates, out, log_file)
        asr_ckpt, mt_ckpt = best_checkpoint(out / "asr"), best_checkpoint(out / "mt")
        if cfg.regime == "cascaded":
            return mt_ckpt

        if cfg.regime == "pretrained":
            params = build_params("ast", mc, len(res.target_vocab), seed=cfg.seed)
            init_from_pretrained(params, asr_ckpt, mt_ckpt)
            (out / "ast").mkdir(exist_ok=True)
            save_checkpoint(params, out / "ast" / "ckpt-0")  # state right after transfer
            _stage("ast", params, cfg, res, cfg.updates, out, log_file)
            return best_checkpoint(out / "ast")

        params = build_multitask_params(mc, len(res.target_vocab), len(res.transcript_vocab),
                                        len(res.source_vocab), seed=cfg.seed)
        init_multitask(params, asr_ckpt, mt_ckpt)
        views = multitask_views(params, mc)
        stage_dir = out / "multitask"
        stage_dir.mkdir(exist_ok=True)
        save_checkpoint(params, stage_dir / "ckpt-0")
        result = fit(views, {t: res.data[t] for t in views}, cfg.train_config(), cfg.updates,
                     schedule=schedule_task, out_dir=stage_dir, log_file=log_file,
                     select_task="ast", max_decode_len=cfg.max_target_len)
        _finish(stage_dir, params, result, cfg.updates)
        return best_checkpoint(stage_dir)


# ---------------------------------------------------------------- checkpoints -> models


def infer_model_config(params: Params, encoder_prefix: str = "encoder",
                       decoder_prefix: str = "decoder") -> tuple[ModelConfig, str]:
    """Recover layer sizes (and the encoder kind) from checkpoint shapes."""
    e, d = encoder_prefix, decoder_prefix
    try:
        dec = dict(
            decoder_cell=params[f"{d}.lstm1.W_h"].shape[0],
            target_embed=params[f"{d}.emb"].shape[1],
            output_size=params[f"{d}.out.W_out"].shape[0] if f"{d}.out.W_out" in params else 0,
            attention_size=params[f"{d}.att.W_a"].shape[1],
        )
        if f"{e}.emb" in params:
            cfg = ModelConfig(text_embed=params[f"{e}.emb"].shape[1],
                              encoder_cell=params[f"{e}.lstm.fw.W_h"].shape[0], **dec)
            return cfg, "text"
        layers = 0
        while f"{e}.lstm{layers + 1}.fw.W_h" in params:
            layers += 1
        cfg = ModelConfig(
            n_features=params[f"{e}.in1.W"].shape[0],
            input_sizes=(params[f"{e}.in1.W"].shape[1], params[f"{e}.in2.W"].shape[1]),
            conv_filters=params[f"{e}.conv1.W"].shape[3],
            speech_layers=layers,
            encoder_cell=params[f"{e}.lstm1.fw.W_h"].shape[0],
            **dec)
        return cfg, "speech"
    except KeyError as err:
        raise ConfigError(f"checkpoint lacks parameter {err.args[0]}") from None


def model_from_checkpoint(path, dtype=np.float32) -> Seq2Seq:
    params = load_checkpoint(path, dtype)
    cfg, enc = infer_model_config(params)
    return Seq2Seq(params, cfg, enc)

