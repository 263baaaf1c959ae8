"""Command-line entry point: ``slt {train,decode,eval,features,make-toy-corpus}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .audio import AudioFormatError, SignalTooShort, extract_features, read_feature_cache, write_feature_cache
from .autodiff import NumericError
from .corpus import CorpusError, make_toy_corpus, read_lines, write_lines
from .decode import (BeamConfig, VocabularyMismatch, beam_decode, cascade_translate, greedy_decode_batch,
                     nbest_lines)
from .experiment import ConfigError, load_config, model_from_checkpoint, parse_config, run_experiment
from .metrics import EmptyCorpusError, bleu_details, wer_details
from .model import CheckpointError
from .text import BpeModel, Vocabulary, VocabularyError, bpe_sentence, decode, encode, normalize
from .train import TransferError

log = logging.getLogger("slt")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    overrides = _overrides(args.set)
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = parse_config("", overrides)
    cfg.validate()
    best = run_experiment(cfg)
    print(f"best checkpoint: {best}")
    return EXIT_OK


def _load_vocab(path) -> Vocabulary:
    try:
        return Vocabulary.load(path)
    except OSError as e:
        raise UsageError(f"cannot read vocabulary {path}: {e.strerror}") from None


def _check_vocab(model, vocab: Vocabulary, what: str) -> None:
    if model.target_vocab_size != len(vocab):
        raise VocabularyMismatch(f"{what}: checkpoint has {model.target_vocab_size} output symbols, "
                                 f"vocabulary has {len(vocab)}")


def _sources(args, model_dir: Path, encoder: str):
    """Decoding inputs: (utterance ids, sources) for speech or text models."""
    if encoder == "speech":
        if not args.features or not args.ids:
            raise UsageError("speech models need --features and --ids")
        feats = read_feature_cache(args.features)
        ids = read_lines(args.ids)
        missing = [u for u in ids if u not in feats]
        if missing:
            raise UsageError(f"{len(missing)} ids not in the feature cache, e.g. {missing[0]}")
        return ids, [feats[u].frames for u in ids]
    if not args.text:
        raise UsageError("text models need --text")
    bpe = BpeModel.load(model_dir / "bpe.codes")
    sv = _load_vocab(model_dir / "source.vocab")
    lines = read_lines(args.text)
    return [str(j) for j in range(len(lines))], [encode(bpe_sentence(normalize(s), bpe), sv) for s in lines]


def cmd_decode(args) -> int:
    model_dir = Path(args.model_dir)
    config = BeamConfig(width=args.beam or 1, max_len=args.max_len, alpha=args.alpha)
    if args.cascade:
        if not args.asr_ckpt or not args.mt_ckpt:
            raise UsageError("--cascade requires both --asr-ckpt and --mt-ckpt")
        asr, mt = model_from_checkpoint(args.asr_ckpt), model_from_checkpoint(args.mt_ckpt)
        asr_vocab = _load_vocab(model_dir / "transcript.vocab")
        tgt_vocab = _load_vocab(model_dir / "target.vocab")
        _check_vocab(asr, asr_vocab, "ASR")
        _check_vocab(mt, tgt_vocab, "MT")
        bpe = BpeModel.load(model_dir / "bpe.codes")
        src_vocab = _load_vocab(model_dir / "source.vocab")
        ids, sources = _sources(args, model_dir, "speech")
        lines = [cascade_translate(asr, mt, s, bpe, config, asr_vocab, src_vocab, tgt_vocab) for s in sources]
    else:
        if not args.ckpt:
            raise UsageError("--ckpt is required (or --cascade)")
        models = [model_from_checkpoint(p) for p in args.ckpt]
        vocab = _load_vocab(model_dir / ("transcript.vocab" if args.task == "asr" else "target.vocab"))
        for m, p in zip(models, args.ckpt):
            _check_vocab(m, vocab, p)
        if len({m.encoder for m in models}) != 1:
            raise UsageError("ensemble members must share the encoder type")
        ids, sources = _sources(args, model_dir, models[0].encoder)
        target = models if len(models) > 1 else models[0]
        if args.greedy or (not args.beam and not args.nbest):
            outs = greedy_decode_batch(target, sources, args.max_len)
            lines = [decode(o, vocab) for o in outs]
        else:
            lines = []
            for utt, src in zip(ids, sources):
                hyps = beam_decode(target, src, config)
                if args.nbest:
                    lines.extend(nbest_lines(utt, hyps[:args.nbest], vocab))
                else:
                    lines.append(decode(hyps[0].tokens, vocab))
    if args.output:
        write_lines(args.output, lines)
    else:
        sys.stdout.write("".join(line + "\n" for line in lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    if len(hyps) != len(refs):
        raise UsageError(f"hypothesis file has {len(hyps)} lines, reference file {len(refs)}")
    pairs = list(zip(hyps, refs))
    if args.metric == "bleu":
        res = bleu_details(pairs)
        print(f"BLEU = {res.score:.1f}")
    else:
        res = wer_details(pairs)
        print(f"WER = {res.score:.1f}")
    out = args.breakdown or f"{args.hyp}.{args.metric}"
    Path(out).write_text(res.breakdown(), encoding="utf-8")
    return EXIT_OK


def cmd_features(args) -> int:
    wav_dir = Path(args.wav_dir)
    if not wav_dir.is_dir():
        raise UsageError(f"{wav_dir} is not a directory")
    wavs = sorted(wav_dir.glob("*.wav"))
    if not wavs:
        raise UsageError(f"no .wav files in {wav_dir}")
    feats = []
    for w in wavs:
        try:
            feats.append(extract_features(w))
        except (AudioFormatError, SignalTooShort) as e:
            log.warning("skipping %s: %s", w.name, e)
    if not feats:
        raise UsageError(f"no readable audio in {wav_dir}")
    write_feature_cache(args.out, feats)
    print(f"{len(feats)} utterances -> {args.out}")
    return EXIT_OK


TOY_MODEL = {
    "input_sizes": "32,32", "conv_filters": "4", "speech_layers": "2", "encoder_cell": "32",
    "text_embed": "32", "decoder_cell": "64", "target_embed": "16", "output_size": "64",
    "batch_size": "10", "dropout": "0.0", "symbol_dropout": "0.0", "eval_interval": "100",
    "updates": "1000", "bpe_merges": "20", "max_target_len": "60",
}


def toy_config_text(corpus_dir: Path) -> str:
    d = corpus_dir.resolve()
    lines = ["# toy experiment written by make-toy-corpus", "task = ast", "regime = end2end",
             f"out_dir = {d / 'exp'}", f"features = {d / 'features.sltf'}"]
    for split in ("train", "dev"):
        lines += [f"{split}_ids = {d / (split + '.ids')}", f"{split}_src = {d / (split + '.src')}",
                  f"{split}_tgt = {d / (split + '.tgt')}"]
    lines += [f"{k} = {v}" for k, v in TOY_MODEL.items()]
    return "\n".join(lines) + "\n"


def cmd_make_toy_corpus(args) -> int:
    out = Path(args.out)
    sizes = make_toy_corpus(out, args.train, args.dev, args.test, args.seed)
    (out / "toy.conf").write_text(toy_config_text(out), encoding="utf-8")
    print(" ".join(f"{k}={v}" for k, v in sizes.items()) + f" -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slt", description="Speech translation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model (regimes: end2end, pretrained, multitask, cascaded)")
    t.add_argument("config", nargs="?", help="config file of 'key = value' lines")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode with one or more checkpoints")
    d.add_argument("--model-dir", required=True, help="training output directory (vocabularies, BPE)")
    d.add_argument("--ckpt", action="append", help="checkpoint; repeat for an ensemble")
    d.add_argument("--task", choices=("ast", "asr", "mt"), default="ast")
    d.add_argument("--features", help="feature cache (speech input)")
    d.add_argument("--ids", help="utterance ids to decode (speech input)")
    d.add_argument("--text", help="source sentences (MT input)")
    mode = d.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true")
    mode.add_argument("--beam", type=int, metavar="WIDTH")
    d.add_argument("--ensemble", action="store_true", help="informational; several --ckpt ensemble")
    d.add_argument("--cascade", action="store_true", help="ASR then MT")
    d.add_argument("--asr-ckpt")
    d.add_argument("--mt-ckpt")
    d.add_argument("--nbest", type=int, default=0, help="write the N best as 'id ||| rank ||| score ||| text'")
    d.add_argument("--alpha", type=float, default=1.0, help="length-normalisation exponent")
    d.add_argument("--max-len", type=int, default=300)
    d.add_argument("-o", "--output")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="score hypotheses against references")
    e.add_argument("hyp")
    e.add_argument("ref")
    e.add_argument("--metric", choices=("bleu", "wer"), default="bleu")
    e.add_argument("--breakdown", help="breakdown output path (default HYP.METRIC)")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("features", help="extract MFCC features from a directory of WAVs")
    f.add_argument("wav_dir")
    f.add_argument("out")
    f.set_defaults(func=cmd_features)

    m = sub.add_parser("make-toy-corpus", help="write a synthetic tone-coded corpus")
    m.add_argument("out")
    m.add_argument("--train", type=int, default=50)
    m.add_argument("--dev", type=int, default=20)
    m.add_argument("--test", type=int, default=20)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_toy_corpus)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "decode" and args.ensemble and len(args.ckpt or []) < 2:
        print("error: --ensemble needs at least two --ckpt", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CorpusError, CheckpointError, TransferError, VocabularyError,
            VocabularyMismatch, EmptyCorpusError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
