"""Attention encoder-decoder models for ASR, MT and speech translation.

Speech encoder: two tanh input layers, two stride-2 3x3 convolutions with 16
filters, then a stack of bidirectional LSTMs. Text encoder: embeddings and one
bidirectional LSTM. Decoder: a conditional LSTM (two cells with attention in
between) feeding an output layer that scores the target characters.

All functions work on padded batches. Parameters live in a flat, ordered
``dict[str, Tensor]``; names are the stable keys used by checkpoints and by
pre-training transfer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .text import BOS, PAD

Params = dict[str, Tensor]

NEG_INF = -1e9


@dataclass
class ModelConfig:
    """Layer sizes. Defaults are the LibriSpeech settings."""

    n_features: int = 41
    input_sizes: tuple[int, int] = (256, 128)
    conv_filters: int = 16
    speech_layers: int = 3
    encoder_cell: int = 256
    text_embed: int = 256
    decoder_cell: int = 512
    target_embed: int = 128
    output_size: int = 512  # 0 disables the non-linear output layer
    attention_size: int = 0  # 0 means decoder_cell

    @property
    def annotation_size(self) -> int:
        return 2 * self.encoder_cell

    @property
    def conv_width(self) -> int:
        return self.conv_filters * ad.conv_out_len(ad.conv_out_len(self.input_sizes[1]))

    @property
    def att_size(self) -> int:
        return self.attention_size or self.decoder_cell

    @property
    def generate_input_size(self) -> int:
        return self.decoder_cell + self.annotation_size + self.target_embed


LIBRISPEECH = ModelConfig()
BTEC = ModelConfig(decoder_cell=256, target_embed=64, output_size=0, text_embed=128)


# ---------------------------------------------------------------- parameters


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape).astype(dtype)


def _matrix(params, name, rng, rows, cols, dtype):
    params[name] = Tensor(glorot(rng, (rows, cols), rows, cols, dtype), requires_grad=True)


def _zeros(params, name, shape, dtype):
    params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_lstm(params: Params, prefix: str, n_in: int, n: int, rng, dtype) -> None:
    _matrix(params, f"{prefix}.W_x", rng, n_in, 4 * n, dtype)
    _matrix(params, f"{prefix}.W_h", rng, n, 4 * n, dtype)
    b = np.zeros(4 * n, dtype=dtype)
    b[n:2 * n] = 1.0  # forget gate
    params[f"{prefix}.b"] = Tensor(b, requires_grad=True)


def init_speech_encoder(params: Params, cfg: ModelConfig, rng, dtype, prefix="encoder") -> None:
    n_in = cfg.n_features
    for j, size in enumerate(cfg.input_sizes, 1):
        _matrix(params, f"{prefix}.in{j}.W", rng, n_in, size, dtype)
        _zeros(params, f"{prefix}.in{j}.b", size, dtype)
        n_in = size
    depth = 1
    for j in (1, 2):
        K = cfg.conv_filters
        w = glorot(rng, (3, 3, depth, K), 9 * depth, 9 * K, dtype)
        params[f"{prefix}.conv{j}.W"] = Tensor(w, requires_grad=True)
        _zeros(params, f"{prefix}.conv{j}.b", K, dtype)
        depth = K
    n_in = cfg.conv_width
    for layer in range(1, cfg.speech_layers + 1):
        for d in ("fw", "bw"):
            init_lstm(params, f"{prefix}.lstm{layer}.{d}", n_in, cfg.encoder_cell, rng, dtype)
        n_in = cfg.annotation_size


def init_text_encoder(params: Params, cfg: ModelConfig, vocab_size: int, rng, dtype,
                      prefix="text_encoder") -> None:
    _matrix(params, f"{prefix}.emb", rng, vocab_size, cfg.text_embed, dtype)
    for d in ("fw", "bw"):
        init_lstm(params, f"{prefix}.lstm.{d}", cfg.text_embed, cfg.encoder_cell, rng, dtype)


def init_decoder(params: Params, cfg: ModelConfig, vocab_size: int, rng, dtype,
                 prefix="decoder") -> None:
    m2, a = cfg.annotation_size, cfg.att_size
    _matrix(params, f"{prefix}.emb", rng, vocab_size, cfg.target_embed, dtype)
    init_lstm(params, f"{prefix}.lstm1", cfg.target_embed, cfg.decoder_cell, rng, dtype)
    init_lstm(params, f"{prefix}.lstm2", m2, cfg.decoder_cell, rng, dtype)
    _matrix(params, f"{prefix}.att.W_a", rng, cfg.decoder_cell, a, dtype)
    _matrix(params, f"{prefix}.att.U_a", rng, m2, a, dtype)
    _zeros(params, f"{prefix}.att.b_a", a, dtype)
    params[f"{prefix}.att.v"] = Tensor(glorot(rng, (a,), a, 1, dtype), requires_grad=True)
    d_in = cfg.generate_input_size
    if cfg.output_size:
        _matrix(params, f"{prefix}.out.W_out", rng, cfg.output_size, d_in, dtype)
        _zeros(params, f"{prefix}.out.b_out", cfg.output_size, dtype)
        d_in = cfg.output_size
    _matrix(params, f"{prefix}.out.W_proj", rng, vocab_size, d_in, dtype)
    _zeros(params, f"{prefix}.out.b_proj", vocab_size, dtype)


def count_parameters(params: Params) -> int:
    return sum(p.data.size for p in params.values())


# ---------------------------------------------------------------- dropout


class Dropout:
    """Variational dropout: one mask per named site, shared by the whole batch
    and every time step. A fresh instance is made per mini-batch."""

    def __init__(self, rate: float = 0.0, rng: np.random.Generator | None = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.masks: dict[str, np.ndarray] = {}

    def __call__(self, site: str, x: Tensor) -> Tensor:
        if self.rate == 0.0 or self.rng is None:
            return x
        mask = self.masks.get(site)
        if mask is None:
            mask = variational_dropout_mask(x.shape[-1], self.rate, self.rng).astype(x.dtype)
            self.masks[site] = mask
        return ad.mul(x, mask)


def variational_dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-scaling Bernoulli mask; entries are 0 or 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


NO_DROPOUT = Dropout(0.0)


# ---------------------------------------------------------------- encoders


@dataclass
class Annotations:
    """Encoder output ``h`` (B, T', 2m) with its validity ``mask`` (B, T')."""

    h: Tensor
    mask: np.ndarray
    keys: dict[str, Tensor] = field(default_factory=dict)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)

    def select(self, index) -> "Annotations":
        index = np.asarray(index)
        return Annotations(self.h[index], self.mask[index],
                           {k: v[index] for k, v in self.keys.items()})


def pad_batch(seqs, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length arrays along a new batch axis with zero padding."""
    lengths = [len(s) for s in seqs]
    T = max(lengths)
    first = np.asarray(seqs[0])
    out = np.zeros((len(seqs), T) + first.shape[1:], dtype=dtype)
    mask = np.zeros((len(seqs), T), dtype=dtype)
    for j, s in enumerate(seqs):
        out[j, :len(s)] = s
        mask[j, :len(s)] = 1.0
    return out, mask


def bilstm(params: Params, prefix: str, x: Tensor, mask: np.ndarray) -> Tensor:
    """Bidirectional LSTM over (B, T, d); returns (B, T, 2n) forward ⊕ backward."""
    B, T, _ = x.shape
    full = mask.all(axis=0)
    outs = []
    for d in ("fw", "bw"):
        W_x, W_h, b = (params[f"{prefix}.{d}.{k}"] for k in ("W_x", "W_h", "b"))
        n = W_h.shape[0]
        state = Tensor(np.zeros((B, 2 * n), dtype=x.dtype))
        steps = range(T) if d == "fw" else range(T - 1, -1, -1)
        states = [None] * T
        for t in steps:
            state = ad.lstm_cell(state, x[:, t], W_x, W_h, b, mask=None if full[t] else mask[:, t])
            states[t] = state
        outs.append(ad.stack(states, axis=1)[:, :, n:])
    return ad.concat(outs, axis=-1)


def _mask3(mask: np.ndarray, dtype) -> np.ndarray:
    return mask.astype(dtype)[:, :, None]


def encode_speech(features, params: Params, cfg: ModelConfig, dropout: Dropout = NO_DROPOUT,
                  prefix: str = "encoder") -> Annotations:
    """Encode a batch of (T_i, n) feature matrices into annotations.

    ``features`` is a list of arrays, or one (T, n) array for a single utterance.
    """
    if isinstance(features, np.ndarray) and features.ndim == 2:
        features = [features]
    dtype = params[f"{prefix}.in1.W"].dtype
    for f in features:
        if len(f) < 1:
            raise ValueError("utterance has no frames")
        if not np.isfinite(f).all():
            raise ad.NumericError("non-finite input features")
    X, mask = pad_batch(features, dtype=dtype)
    x = Tensor(X)
    for j in (1, 2):
        x = ad.tanh(ad.affine(x, params[f"{prefix}.in{j}.W"], params[f"{prefix}.in{j}.b"]))
        x = dropout(f"{prefix}.in{j}", x)
    x = ad.mul(x, _mask3(mask, dtype))
    x = ad.reshape(x, x.shape + (1,))
    for j in (1, 2):
        x = ad.tanh(ad.conv2d(x, params[f"{prefix}.conv{j}.W"], params[f"{prefix}.conv{j}.b"]))
        # frames past each utterance's end must stay zero for the next layer
        mask = mask[:, ::2]
        x = ad.mul(x, mask.astype(dtype)[:, :, None, None])
    B, T2, F2, K = x.shape
    x = ad.reshape(x, (B, T2, F2 * K))
    x = dropout(f"{prefix}.conv", x)
    for layer in range(1, cfg.speech_layers + 1):
        x = bilstm(params, f"{prefix}.lstm{layer}", x, mask)
        x = dropout(f"{prefix}.lstm{layer}", x)
    return Annotations(ad.mul(x, _mask3(mask, dtype)), mask)


def encode_text(ids, params: Params, cfg: ModelConfig | None = None, dropout: Dropout = NO_DROPOUT,
                prefix: str = "text_encoder") -> Annotations:
    """Embed and encode a batch of id sequences (list of int sequences)."""
    if len(ids) and np.isscalar(ids[0]):
        ids = [ids]
    if any(len(s) == 0 for s in ids):
        raise ValueError("empty source sequence")
    emb = params[f"{prefix}.emb"]
    arr, mask = pad_batch([np.asarray(s, dtype=np.int64) for s in ids], dtype=np.float64)
    x = ad.take_rows(emb, arr.astype(np.int64))
    x = dropout(f"{prefix}.emb", x)
    mask = mask.astype(emb.dtype)
    x = bilstm(params, f"{prefix}.lstm", x, mask)
    x = dropout(f"{prefix}.lstm", x)
    return Annotations(ad.mul(x, _mask3(mask, emb.dtype)), mask)


# ---------------------------------------------------------------- decoder


@dataclass
class DecoderState:
    """Recurrent state between decoder steps.

    ``s`` and ``s2`` are the packed ``[cell, hidden]`` states (B, 2m') produced
    by the first and second cell at the last step; their hidden halves are the
    outputs o_t and o'_t. ``context`` is the last attention context and
    ``prev`` the previously emitted symbols.
    """

    s: Tensor
    s2: Tensor
    context: Tensor
    prev: np.ndarray
    weights: np.ndarray | None = None

    @property
    def o(self) -> Tensor:
        return self.s[:, self.s.shape[1] // 2:]

    @property
    def o2(self) -> Tensor:
        return self.s2[:, self.s2.shape[1] // 2:]

    def select(self, index) -> "DecoderState":
        index = np.asarray(index)
        return DecoderState(self.s[index], self.s2[index], self.context[index], self.prev[index],
                            None if self.weights is None else self.weights[index])


def initial_state(batch: int, cfg: ModelConfig, dtype=np.float32) -> DecoderState:
    z = Tensor(np.zeros((batch, 2 * cfg.decoder_cell), dtype=dtype))
    ctx = Tensor(np.zeros((batch, cfg.annotation_size), dtype=dtype))
    return DecoderState(z, z, ctx, np.full(batch, BOS, dtype=np.int64))


def attention_keys(annotations: Annotations, params: Params, prefix: str = "decoder") -> Tensor:
    keys = annotations.keys.get(prefix)
    if keys is None:
        keys = ad.affine(annotations.h, params[f"{prefix}.att.U_a"], params[f"{prefix}.att.b_a"])
        annotations.keys[prefix] = keys
    return keys


def attention(o_t: Tensor, annotations: Annotations, params: Params,
              prefix: str = "decoder") -> tuple[Tensor, np.ndarray]:
    """Additive attention: ``e_i = v . tanh(W_a o_t + U_a h_i + b_a)``.

    Returns the context (B, 2m) and the weights (B, T'). Padded positions get
    zero weight. ``U_a h_i + b_a`` is computed once per source and cached on
    ``annotations``.
    """
    keys = attention_keys(annotations, params, prefix)
    return ad.attend(o_t, keys, params[f"{prefix}.att.W_a"], params[f"{prefix}.att.v"],
                     annotations.h, annotations.mask)


def output_scores(o2: Tensor, context: Tensor, emb_prev: Tensor, params: Params,
                  prefix: str = "decoder", dropout: Dropout = NO_DROPOUT) -> Tensor:
    """Scores over the target vocabulary from ``o'_t ⊕ c_t ⊕ E(y_{t-1})``.

    Works on any leading shape. With an output layer this is
    ``W_proj tanh(W_out x + b_out) + b_proj``; without one, ``W_proj x + b_proj``.
    """
    x = ad.concat([o2, context, emb_prev], axis=-1)
    x = dropout(f"{prefix}.out", x)
    return generate_scores(x, params, prefix)


def generate_scores(x: Tensor, params: Params, prefix: str = "decoder") -> Tensor:
    W_out = params.get(f"{prefix}.out.W_out")
    if W_out is not None:
        x = ad.tanh(ad.affine(x, ad.transpose(W_out), params[f"{prefix}.out.b_out"]))
    return ad.affine(x, ad.transpose(params[f"{prefix}.out.W_proj"]), params[f"{prefix}.out.b_proj"])


def _decoder_core(state: DecoderState, prev_ids, annotations: Annotations, params: Params,
                  prefix: str, dropout: Dropout):
    emb = ad.take_rows(params[f"{prefix}.emb"], prev_ids)
    emb = dropout(f"{prefix}.emb", emb)
    lstm = lambda j: [params[f"{prefix}.lstm{j}.{k}"] for k in ("W_x", "W_h", "b")]  # noqa: E731
    # first cell: previous second-cell state + previous symbol
    s1 = ad.lstm_cell(state.s2, emb, *lstm(1))
    n = s1.shape[1] // 2
    ctx, weights = attention(s1[:, n:], annotations, params, prefix)
    # second cell: state just produced by the first cell + context
    s2 = ad.lstm_cell(s1, ctx, *lstm(2))
    new_state = DecoderState(s1, s2, ctx, np.asarray(prev_ids), weights)
    return new_state, s2[:, n:], ctx, emb


def decoder_step(state: DecoderState, annotations: Annotations, params: Params,
                 prefix: str = "decoder", dropout: Dropout = NO_DROPOUT,
                 prev_ids=None) -> tuple[DecoderState, Tensor]:
    """One decoding step from ``state.prev`` (or ``prev_ids`` if given).

    Returns the new state and the score vector z of shape (B, |V|).
    """
    prev = state.prev if prev_ids is None else np.asarray(prev_ids, dtype=np.int64)
    new_state, o2, ctx, emb = _decoder_core(state, prev, annotations, params, prefix, dropout)
    return new_state, output_scores(o2, ctx, emb, params, prefix, dropout)


# ---------------------------------------------------------------- whole model


TASK_ENCODERS = {"asr": "speech", "ast": "speech", "mt": "text"}


@dataclass
class Seq2Seq:
    """One task's view over a parameter store.

    Several views may share the same ``params`` dict (multi-task training), in
    which case their prefixes select the shared and task-specific parts.
    """

    params: Params
    cfg: ModelConfig
    encoder: str = "speech"
    encoder_prefix: str = "encoder"
    decoder_prefix: str = "decoder"

    @property
    def dtype(self):
        return self.params[f"{self.decoder_prefix}.emb"].dtype

    @property
    def target_vocab_size(self) -> int:
        return self.params[f"{self.decoder_prefix}.emb"].shape[0]

    def parameter_names(self) -> list[str]:
        return [k for k in self.params
                if k.startswith(self.encoder_prefix + ".") or k.startswith(self.decoder_prefix + ".")]

    def encode(self, sources, dropout: Dropout = NO_DROPOUT) -> Annotations:
        if self.encoder == "speech":
            return encode_speech(sources, self.params, self.cfg, dropout, self.encoder_prefix)
        return encode_text(sources, self.params, self.cfg, dropout, self.encoder_prefix)

    def initial_state(self, batch: int) -> DecoderState:
        return initial_state(batch, self.cfg, self.dtype)

    def step(self, state: DecoderState, annotations: Annotations, prev_ids=None,
             dropout: Dropout = NO_DROPOUT) -> tuple[DecoderState, Tensor]:
        return decoder_step(state, annotations, self.params, self.decoder_prefix, dropout, prev_ids)

    def loss(self, sources, targets, dropout: Dropout = NO_DROPOUT, decoder_inputs=None) -> Tensor:
        """Teacher-forced cross-entropy averaged over non-PAD target symbols.

        ``targets`` are id sequences ending in EOS. The decoder is fed BOS and
        then ``decoder_inputs`` (defaults to the targets shifted right).
        """
        annotations = self.encode(sources, dropout)
        tgt, tmask = pad_batch([np.asarray(t, dtype=np.int64) for t in targets], dtype=np.float64)
        tgt = tgt.astype(np.int64)
        if decoder_inputs is None:
            inp = tgt
        else:
            inp = pad_batch([np.asarray(t, dtype=np.int64) for t in decoder_inputs])[0].astype(np.int64)
        B, L = tgt.shape
        state = self.initial_state(B)
        prev = np.full(B, BOS, dtype=np.int64)
        xs = []
        for t in range(L):
            state, o2, ctx, emb = _decoder_core(state, prev, annotations, self.params,
                                                self.decoder_prefix, dropout)
            xs.append(ad.concat([o2, ctx, emb], axis=-1))
            prev = inp[:, t]
        x = ad.stack(xs, axis=1)
        x = dropout(f"{self.decoder_prefix}.out", x)
        z = generate_scores(x, self.params, self.decoder_prefix)
        weights = tmask.reshape(-1) / tmask.sum()
        return ad.cross_entropy(ad.reshape(z, (B * L, z.shape[-1])), tgt.reshape(-1), weights)


def build_params(task: str, cfg: ModelConfig, target_vocab: int, source_vocab: int = 0,
                 seed: int = 0, dtype=np.float32, rng: np.random.Generator | None = None) -> Params:
    rng = rng if rng is not None else np.random.default_rng(seed)
    params: Params = {}
    if TASK_ENCODERS[task] == "speech":
        init_speech_encoder(params, cfg, rng, dtype)
    else:
        init_text_encoder(params, cfg, source_vocab, rng, dtype, prefix="encoder")
    init_decoder(params, cfg, target_vocab, rng, dtype)
    return params


def build_model(task: str, cfg: ModelConfig, target_vocab: int, source_vocab: int = 0,
                seed: int = 0, dtype=np.float32) -> Seq2Seq:
    params = build_params(task, cfg, target_vocab, source_vocab, seed, dtype)
    return Seq2Seq(params, cfg, TASK_ENCODERS[task])


def cast_params(params: Params, dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in params.items()}


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SLTC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Params, path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, dtype=np.float32) -> Params:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    params: Params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params
