"""Acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL  detail`` line; the lines are
repeated in the pytest terminal summary. Run standalone with
``python tests/test_acceptance.py``.
"""

import math
import random
import string
import time

import numpy as np
import pytest

from conftest import TINY
from slt import autodiff as ad
from slt.audio import MfccConfig, PcmSignal, compute_features, extract_features, filterbank_energies, \
    frame_signal, write_wav
from slt.autodiff import Tensor
from slt.cli import TOY_MODEL, main, toy_config_text
from slt.corpus import make_toy_corpus
from slt.decode import BeamConfig, Hypothesis, beam_decode, greedy_decode, greedy_decode_batch
from slt.experiment import model_from_checkpoint, parse_config, prepare, run_experiment
from slt.metrics import bleu, levenshtein, wer
from slt.model import Annotations, ModelConfig, Seq2Seq, attention, build_model, build_params, \
    save_checkpoint
from slt.text import apply_bpe, decode, learn_bpe, normalize
from slt.train import AdamState, batches, init_from_pretrained, schedule_task, train_step, transfer
from test_audio import direct_dft_filterbank
from test_decode import enumerate_all, sequence_logprob

RESULTS: list[str] = []
CURVES: list[str] = []


def report(n: int, ok: bool, detail: str = "") -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def toy_experiment(corpus, out, **overrides):
    values = {**TOY_MODEL, "out_dir": str(out), **{k: str(v) for k, v in overrides.items()}}
    return parse_config(toy_config_text(corpus), values)


def log_curve(path, task):
    curve = []
    for line in path.read_text().splitlines():
        step, t, _, value = line.split("\t")
        if t == task:
            curve.append((int(step), float(value)))
    return curve


# 1
def test_gradient_correctness():
    cfg = ModelConfig(n_features=41, input_sizes=(8, 8), conv_filters=4, speech_layers=2, encoder_cell=4,
                      decoder_cell=4, target_embed=4, output_size=4)
    m = build_model("ast", cfg, 12, seed=0, dtype=np.float64)
    x = [np.random.default_rng(1).standard_normal((16, 41))]
    y = [[4, 7, 11, 3, 9, 2]]
    params = [m.params[k] for k in m.parameter_names()]
    t0 = time.perf_counter()
    err = ad.grad_check(lambda: m.loss(x, y), params, stencil=5)
    secs = time.perf_counter() - t0
    n = sum(p.data.size for p in params)
    report(1, err < 1e-4 and secs < 60, f"max rel err {err:.2e} over {n} params in {secs:.1f}s "
                                         "(limit 1e-4, 60s)")


# 2
def test_shape_law():
    cfg = ModelConfig(n_features=5, input_sizes=(6, 128), conv_filters=16, speech_layers=1,
                      encoder_cell=3, decoder_cell=3, target_embed=2, output_size=2)
    m = build_model("ast", cfg, 5, seed=0, dtype=np.float64)
    rng = np.random.default_rng(2)
    bad = []
    for T in rng.integers(1, 401, size=200):
        ann = m.encode([rng.standard_normal((int(T), 5))])
        want = math.ceil(math.ceil(T / 2) / 2)
        if ann.h.shape != (1, want, 2 * cfg.encoder_cell) or ann.mask.sum() != want:
            bad.append(int(T))
    first_lstm = m.params["encoder.lstm1.fw.W_x"].shape[0]
    report(2, not bad and cfg.conv_width == 512 and first_lstm == 512,
           f"200 lengths, {len(bad)} mismatches; conv width {cfg.conv_width}, first LSTM input {first_lstm}")


# 3
def test_attention_normalization():
    rng = np.random.default_rng(3)
    worst, negative = 0.0, False
    for step in range(1000):
        if step % 100 == 0:
            m = build_model("ast", ModelConfig(n_features=4, input_sizes=(4, 4), conv_filters=1, speech_layers=1,
                                               encoder_cell=3, decoder_cell=5), 4, seed=step, dtype=np.float64)
        B, T = int(rng.integers(1, 4)), int(rng.integers(1, 30))
        mask = np.ones((B, T))
        for b in range(B):
            mask[b, int(rng.integers(1, T + 1)):] = 0
        h = Tensor(3 * rng.standard_normal((B, T, 6)))
        _, w = attention(Tensor(3 * rng.standard_normal((B, 5))), Annotations(h, mask), m.params)
        negative |= bool((w < 0).any())
        worst = max(worst, float(np.abs(w.sum(axis=1) - 1).max()))
    u = rng.standard_normal(6)
    ctx, _ = attention(Tensor(rng.standard_normal((1, 5))),
                       Annotations(Tensor(np.tile(u, (1, 9, 1))), np.ones((1, 9))), m.params)
    exact = np.array_equal(ctx.data[0], u)
    report(3, not negative and worst < 1e-9 and exact,
           f"1000 steps, max |sum-1| {worst:.1e}, negative weights {negative}, identical-annotation context exact {exact}")


# 4
def test_overfit_toy_corpus(tmp_path):
    make_toy_corpus(tmp_path, n_train=50, n_dev=1, n_test=1, seed=4)
    cfg = toy_experiment(tmp_path, tmp_path / "exp", dev_ids=tmp_path / "train.ids",
                         dev_src=tmp_path / "train.src", dev_tgt=tmp_path / "train.tgt")
    data = prepare(cfg, ["ast"]).data["ast"]
    tc = cfg.train_config()
    model = Seq2Seq(build_params("ast", cfg.model_config(), len(data.vocab), seed=cfg.seed), cfg.model_config())
    adam, rng = AdamState.from_config(tc), np.random.default_rng(cfg.seed)
    stream = batches([len(s) for s, _ in data.train], tc.batch_size, rng)
    sources, targets = [s for s, _ in data.train], [t for _, t in data.train]
    t0 = time.perf_counter()
    loss = score = float("nan")
    done = None
    for step in range(1, 5001):
        train_step([data.train[j] for j in next(stream)], model, "ast", tc, adam, rng)
        if step % 100 == 0:
            with ad.no_grad():
                loss = float(model.loss(sources, targets).data)
            score = bleu(zip(decode_all(model, sources, data.vocab), data.dev_refs))
            if loss < 0.1 and score >= 95:
                done = step
                break
    secs = time.perf_counter() - t0
    report(4, done is not None and secs < 900,
           f"step {done}: train loss {loss:.3f}, train BLEU {score:.1f} in {secs:.0f}s "
           "(need <0.1, >=95 within 5000 updates, 15 min)")


def decode_all(model, sources, vocab):
    return [decode(o, vocab) for o in greedy_decode_batch(model, sources, 60)]


# 5
def test_pretraining_converges_faster(tmp_path):
    corpus = tmp_path / "toy"
    make_toy_corpus(corpus, n_train=200, n_dev=30, n_test=30, seed=5)
    run_experiment(toy_experiment(corpus, tmp_path / "e2e", updates=1000))
    run_experiment(toy_experiment(corpus, tmp_path / "pre", regime="pretrained", updates=1000,
                                  pretrain_updates=1000))
    e2e = log_curve(tmp_path / "e2e" / "train.log", "ast")
    pre = log_curve(tmp_path / "pre" / "train.log", "ast")
    best = max(v for _, v in e2e)
    e2e_step = min(s for s, v in e2e if v >= best)
    pre_step = min((s for s, v in pre if v >= best), default=None)
    for name, curve in (("end2end", e2e), ("pretrained", pre)):
        CURVES.append(f"{name:10s} dev BLEU by update: " + " ".join(f"{s}:{v:.1f}" for s, v in curve))
        print(CURVES[-1])
    report(5, pre_step is not None and pre_step < e2e_step,
           f"end2end best dev BLEU {best:.1f} first at update {e2e_step}; pretrained reaches it at {pre_step}")


# 6
def test_transfer_exactness():
    cfg = ModelConfig(n_features=5, input_sizes=(4, 4), conv_filters=2, speech_layers=2, encoder_cell=3,
                      text_embed=3, decoder_cell=4, target_embed=3, output_size=4)
    asr = build_params("asr", cfg, 9, seed=1, dtype=np.float32)
    mt = build_params("mt", cfg, 11, 7, seed=2, dtype=np.float32)
    ast = build_params("ast", cfg, 11, seed=3, dtype=np.float32)
    before = {k: v.data.copy() for k, v in ast.items()}
    init_from_pretrained(ast, asr, mt)
    moved = [k for k in ast if k.startswith(("encoder.", "decoder."))]
    exact = all(np.array_equal((asr if k.startswith("encoder.") else mt)[k].data, ast[k].data) for k in moved)
    kept = [k for k in ast if k not in moved]
    unchanged = all(np.array_equal(before[k], ast[k].data) for k in kept)
    # a partial transfer must leave everything outside the mapping alone
    part = build_params("ast", cfg, 11, seed=4, dtype=np.float32)
    snap = {k: v.data.copy() for k, v in part.items()}
    transfer(part, asr, {"encoder": "encoder"})
    enc_exact = all(np.array_equal(part[k].data, asr[k].data) for k in part if k.startswith("encoder."))
    dec_kept = all(np.array_equal(part[k].data, snap[k]) for k in part if k.startswith("decoder."))
    report(6, exact and unchanged and enc_exact and dec_kept,
           f"{len(moved)} transferred bitwise-equal {exact}, {len(kept)} others unchanged {unchanged}; "
           f"encoder-only transfer exact {enc_exact}, decoder untouched {dec_kept}")


# 7
def test_schedule_ratio():
    counts = {t: 0 for t in ("ast", "asr", "mt")}
    for step in range(10_000):
        counts[schedule_task(step)] += 1
    report(7, counts == {"ast": 6000, "asr": 2000, "mt": 2000}, f"counts {counts}")


# 8
def test_beam_correctness():
    tiny = ModelConfig(n_features=5, input_sizes=(4, 4), conv_filters=2, speech_layers=1, encoder_cell=4,
                       text_embed=4, decoder_cell=4, target_embed=3, output_size=4)
    exhaustive_ok = greedy_ok = monotone_ok = 0
    for seed in range(50):
        m = build_model("ast", tiny, 3, seed=seed, dtype=np.float64)
        for p in m.params.values():
            p.data *= 3.0
        x = np.random.default_rng(seed).standard_normal((7, 5))
        scored = [(sequence_logprob(m, x, s), s) for s in enumerate_all()]
        best = max(scored, key=lambda c: Hypothesis(c[1], c[0]).normalized(0.0))
        exhaustive_ok += beam_decode(m, x, BeamConfig(27, 3, alpha=0.0))[0].tokens == best[1]
        greedy_ok += beam_decode(m, x, BeamConfig(1, 3))[0].tokens == greedy_decode(m, x, 3)
        tops = [beam_decode(m, x, BeamConfig(w, 3, alpha=0.0))[0].score for w in (1, 2, 4, 8)]
        # same-sequence scores can differ in the last ulp with beam batch size (BLAS rounding)
        monotone_ok += all(b >= a - 1e-12 for a, b in zip(tops, tops[1:]))
    report(8, exhaustive_ok == greedy_ok == monotone_ok == 50,
           f"exhaustive argmax {exhaustive_ok}/50, width1==greedy {greedy_ok}/50, "
           f"monotone in width {monotone_ok}/50")


# 9
def test_self_ensemble(tmp_path):
    cfg = ModelConfig(n_features=41, input_sizes=(8, 8), conv_filters=2, speech_layers=1, encoder_cell=6,
                      decoder_cell=8, target_embed=4, output_size=8)
    save_checkpoint(build_params("ast", cfg, 9, seed=9), tmp_path / "ckpt")
    m = model_from_checkpoint(tmp_path / "ckpt")
    for p in m.params.values():
        p.data *= 3
    rng = np.random.default_rng(9)
    xs = [rng.standard_normal((int(rng.integers(8, 40)), 41)).astype(np.float32) for _ in range(100)]
    same_greedy = greedy_decode_batch([m, m], xs, 12) == greedy_decode_batch(m, xs, 12)
    same_beam = sum(
        [(h.tokens, h.score) for h in beam_decode([m, m], x, BeamConfig(3, 12))]
        == [(h.tokens, h.score) for h in beam_decode(m, x, BeamConfig(3, 12))] for x in xs)
    report(9, same_greedy and same_beam == 100,
           f"greedy identical {same_greedy}; beam n-best identical on {same_beam}/100 utterances")


# 10
def test_metric_oracles():
    hand = bleu([("the cat sat on mat", "the cat sat on the mat")])
    ident = bleu([("a b c d e f", "a b c d e f"), ("one two three four", "one two three four")])
    w = wer([("a c d e", "a b c d")])
    lev = levenshtein("kitten", "sitting").distance
    report(10, abs(hand - 57.9) <= 0.1 and ident == 100.0 and w == 50.0 and lev == 3,
           f"hand BLEU {hand:.4f}, BLEU(x,x) {ident}, WER {w}, Levenshtein {lev}")


# 11
def test_feature_frontend(tmp_path):
    cfg = MfccConfig()
    t = np.arange(16000) / 16000
    shape = compute_features(PcmSignal(0.5 * np.sin(2 * np.pi * 440 * t))).frames.shape
    frame = frame_signal(PcmSignal(0.5 * np.sin(2 * np.pi * 1000 * t)), cfg)[10]
    ours = int(np.argmax(filterbank_energies(frame[None], cfg)[0]))
    oracle = int(np.argmax(direct_dft_filterbank(frame, 1024, 16000, 40)))
    noise = PcmSignal(np.random.default_rng(11).uniform(-0.5, 0.5, 16000))
    write_wav(tmp_path / "n.wav", noise)
    a, b = extract_features(tmp_path / "n.wav"), extract_features(tmp_path / "n.wav")
    same = a.frames.tobytes() == b.frames.tobytes()
    report(11, shape == (97, 41) and ours == oracle and same,
           f"1 s -> {shape}; peak filter {ours} vs oracle {oracle}; bitwise deterministic {same}")


# 12
def test_bpe():
    rng = random.Random(12)
    words = ["".join(rng.choice(string.ascii_lowercase[:8]) for _ in range(rng.randint(1, 9)))
             for _ in range(1000)]
    model = learn_bpe([" ".join(words[:300])] * 2, 60)
    roundtrip = sum("".join(apply_bpe(w, model)).replace("</w>", "") == w for w in words)
    corpus = [" ".join(words[i:i + 20]) for i in range(0, 200, 20)]
    full = learn_bpe(corpus, 40).merges
    stable = all(learn_bpe(corpus, k).merges == full[:k] for k in range(0, 41, 5))
    first = learn_bpe([normalize("low low lower")], 1).merges
    report(12, roundtrip == 1000 and stable and first == (("l", "o"),),
           f"round trip {roundtrip}/1000, prefix stable {stable}, first merge {first[0] if first else None}")


# 13
def test_training_determinism(toy_corpus, tmp_path):
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        args = ["train", str(toy_corpus / "toy.conf")]
        for k, v in {**TINY, "out_dir": str(out), "regime": "pretrained", "pretrain_updates": "10"}.items():
            args += ["--set", f"{k}={v}"]
        assert main(args) == 0
        files = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file() and p.name != "config.txt")
        outputs.append({str(f): (out / f).read_bytes() for f in files})
    same = outputs[0] == outputs[1]
    report(13, same and "train.log" in outputs[0] and "ast/ckpt-10" in outputs[0],
           f"{len(outputs[0])} output files compared (logs, vocabularies, checkpoints), identical {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
