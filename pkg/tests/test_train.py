import math

import numpy as np
import pytest

from slt import autodiff as ad
from slt.autodiff import NumericError, Tensor
from slt.model import Dropout, ModelConfig, build_model, build_params, save_checkpoint
from slt.text import EOS, RESERVED, UNK, Vocabulary
from slt.train import (AdamState, TaskData, TrainConfig, TransferError, adam_step, batches,
                       build_multitask_params, fit, init_from_pretrained, init_multitask,
                       multitask_views, schedule_task, select_checkpoint, symbol_dropout, train_step,
                       truncate_target, variational_dropout_mask)

CFG = ModelConfig(n_features=6, input_sizes=(8, 8), conv_filters=2, speech_layers=1, encoder_cell=8,
                  text_embed=8, decoder_cell=12, target_embed=6, output_size=12)


# ---- Adam

def test_first_adam_step_moves_by_lr():
    p = {"w": Tensor(np.zeros(5), requires_grad=True)}
    g = np.array([3.0, -2.0, 0.5, 1e-3, -7.0])
    adam_step(p, {"w": g}, AdamState())
    assert np.allclose(p["w"].data, -0.001 * np.sign(g), rtol=1e-4)


def test_zero_gradient_leaves_parameters():
    p = {"w": Tensor(np.ones(3), requires_grad=True)}
    state = AdamState()
    adam_step(p, {"w": np.zeros(3)}, state)
    assert np.array_equal(p["w"].data, np.ones(3))
    assert state.step == 1 and state.m["w"].shape == (3,)


def test_adam_minimises_quadratic():
    x = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState()
    for _ in range(5000):
        adam_step({"x": x}, {"x": 2 * x.data}, state)
    assert abs(x.data[0]) < 1e-3


def test_adam_names_bad_parameter():
    p = {"enc.w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(NumericError, match="enc.w"):
        adam_step(p, {"enc.w": np.array([1.0, np.nan])}, AdamState())


# ---- dropout

def test_dropout_masks():
    rng = np.random.default_rng(0)
    assert (variational_dropout_mask(10, 0.0, rng) == 1).all()
    big = variational_dropout_mask(100_000, 0.2, rng)
    assert abs(big.mean() - 1.0) < 0.01
    assert set(np.unique(big)) <= {0.0, 1.25}
    a = variational_dropout_mask(50, 0.3, np.random.default_rng(5))
    b = variational_dropout_mask(50, 0.3, np.random.default_rng(5))
    assert np.array_equal(a, b)
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            variational_dropout_mask(3, bad, rng)


def test_dropout_mask_shared_across_time_and_batch():
    d = Dropout(0.5, np.random.default_rng(1))
    x = Tensor(np.ones((4, 6, 10)))
    y1 = d("site", x).data
    y2 = d("site", Tensor(np.ones((4, 10)))).data
    assert (y1 == y1[0, 0]).all()
    assert np.array_equal(y2[0], y1[0, 0])


def test_symbol_dropout():
    rng = np.random.default_rng(2)
    ids = [0, 1, 2, 3] + [5, 6, 7] * 10
    assert symbol_dropout(ids, 0.0, rng) == ids
    out = symbol_dropout(ids, 1.0, rng)
    assert out[:4] == [0, 1, 2, 3] and set(out[4:]) == {UNK}
    many = symbol_dropout([9] * 100_000, 0.2, rng)
    frac = many.count(UNK) / len(many)
    assert 0.19 <= frac <= 0.21


def test_truncation():
    assert truncate_target([5] * 400 + [EOS], 300) == [5] * 299 + [EOS]
    assert truncate_target([5, 6, EOS], 300) == [5, 6, EOS]


# ---- train_step

def _speech_pair(rng, T=20, L=6, V=10):
    return rng.standard_normal((T, 6)), list(rng.integers(4, V, size=L)) + [EOS]


def test_first_loss_near_uniform():
    model = build_model("ast", CFG, 10, seed=0, dtype=np.float64)
    model.params["decoder.out.W_proj"].data *= 0.01
    rng = np.random.default_rng(3)
    batch = [_speech_pair(rng) for _ in range(4)]
    loss = train_step(batch, model, "ast", TrainConfig(dropout=0.0), AdamState(), rng)
    assert abs(loss - math.log(10)) < 0.1 * math.log(10)


def test_overfit_single_pair():
    cfg = ModelConfig(n_features=6, input_sizes=(16, 16), conv_filters=4, speech_layers=1,
                      encoder_cell=16, decoder_cell=32, target_embed=16, output_size=32)
    model = build_model("ast", cfg, 10, seed=1)
    rng = np.random.default_rng(4)
    batch = [_speech_pair(rng)]
    adam = AdamState()
    for _ in range(200):
        loss = train_step(batch, model, "ast", TrainConfig(dropout=0.0), adam, rng)
    assert loss < 0.1


def test_empty_batch_rejected():
    model = build_model("ast", CFG, 10)
    with pytest.raises(ValueError):
        train_step([], model, "ast", TrainConfig(), AdamState(), np.random.default_rng(0))


def test_loss_trajectory_deterministic():
    def run():
        model = build_model("mt", CFG, 10, 12, seed=2)
        rng = np.random.default_rng(5)
        data = [(list(rng.integers(4, 12, size=5)) + [EOS], list(rng.integers(4, 10, size=4)) + [EOS])
                for _ in range(6)]
        cfg, adam = TrainConfig(batch_size=3), AdamState()
        stream = batches([len(s) for s, _ in data], 3, rng)
        return [train_step([data[j] for j in next(stream)], model, "mt", cfg, adam, rng) for _ in range(5)]

    assert run() == run()


def test_batches_bucket_and_cover_epoch():
    lengths = [5, 1, 9, 3, 7, 2, 8]
    stream = batches(lengths, 3, np.random.default_rng(0))
    epoch = [next(stream) for _ in range(3)]
    assert sorted(j for b in epoch for j in b) == list(range(7))
    for b in epoch:
        ls = [lengths[j] for j in b]
        assert ls == sorted(ls)


# ---- schedule and selection

def test_schedule_cycle_and_ratio():
    assert [schedule_task(s) for s in range(5)] == ["ast", "asr", "ast", "mt", "ast"]
    counts = {t: 0 for t in ("ast", "asr", "mt")}
    for s in range(100):
        counts[schedule_task(s)] += 1
    assert counts == {"ast": 60, "asr": 20, "mt": 20}
    for start in (0, 3, 17):
        window = [schedule_task(s) for s in range(start, start + 5000)]
        assert window.count("ast") == 3000 and window.count("asr") == 1000


def test_select_checkpoint():
    assert select_checkpoint([(1000, 10.0), (2000, 12.5), (3000, 12.5)], "BLEU") == 2000
    assert select_checkpoint([(1000, 30), (2000, 25)], "WER") == 2000
    assert select_checkpoint([(1000, 3.0)]) == 1000
    with pytest.raises(ValueError):
        select_checkpoint([])


# ---- transfer

def test_init_from_pretrained_copies_exactly(tmp_path):
    asr = build_params("asr", CFG, 8, seed=1)
    mt = build_params("mt", CFG, 10, 12, seed=2)
    save_checkpoint(asr, tmp_path / "asr")
    ast = build_params("ast", CFG, 10, seed=3)
    before = {k: v.data.copy() for k, v in ast.items()}
    init_from_pretrained(ast, tmp_path / "asr", mt)
    for k, v in ast.items():
        if k.startswith("encoder."):
            assert np.array_equal(v.data, asr[k].data)
        else:
            assert np.array_equal(v.data, mt[k].data)
    assert "encoder.emb" not in ast and before.keys() == ast.keys()


def test_transfer_shape_mismatch_names_parameter():
    mt = build_params("mt", CFG, 11, 12)  # different target vocabulary
    asr = build_params("asr", CFG, 8)
    ast = build_params("ast", CFG, 10)
    with pytest.raises(TransferError, match="decoder.emb"):
        init_from_pretrained(ast, asr, mt)


def test_transfer_missing_parameter():
    asr = build_params("asr", CFG, 8)
    del asr["encoder.lstm1.fw.b"]
    with pytest.raises(TransferError, match="encoder.lstm1.fw.b"):
        init_from_pretrained(build_params("ast", CFG, 10), asr, build_params("mt", CFG, 10, 12))


def test_multitask_views_share_components():
    params = build_multitask_params(CFG, 10, 8, 12)
    asr, mt = build_params("asr", CFG, 8, seed=4), build_params("mt", CFG, 10, 12, seed=5)
    init_multitask(params, asr, mt)
    views = multitask_views(params, CFG)
    assert set(views["ast"].parameter_names()) & set(views["asr"].parameter_names()) == \
        {k for k in params if k.startswith("encoder.")}
    assert set(views["ast"].parameter_names()) & set(views["mt"].parameter_names()) == \
        {k for k in params if k.startswith("decoder.")}
    assert np.array_equal(params["asr_decoder.emb"].data, asr["decoder.emb"].data)
    assert np.array_equal(params["text_encoder.emb"].data, mt["encoder.emb"].data)


def test_fit_logs_every_interval(tmp_path):
    rng = np.random.default_rng(6)
    pairs = [_speech_pair(rng, T=12, L=3, V=8) for _ in range(4)]
    vocab = Vocabulary(RESERVED + tuple("abcd"))
    data = {"ast": TaskData(pairs, [p[0] for p in pairs[:2]], ["a b", "c d"], vocab)}
    model = build_model("ast", CFG, 8)
    log = tmp_path / "log"
    with open(log, "w") as fh:
        res = fit({"ast": model}, data, TrainConfig(batch_size=2, eval_interval=3), 9,
                  out_dir=tmp_path, log_file=fh, max_decode_len=5)
    lines = log.read_text().splitlines()
    assert [line.split("\t")[:3] for line in lines] == [["3", "ast", "BLEU"], ["6", "ast", "BLEU"],
                                                         ["9", "ast", "BLEU"]]
    assert len(res.losses) == 9
    assert (tmp_path / f"ckpt-{res.best_step}").exists()
    assert ad.grad_enabled()
