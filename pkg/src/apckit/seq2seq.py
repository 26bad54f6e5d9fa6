"""Attention-based sequence transduction probe.

Encoder: two stride-2 time convolutions (kernel 3, GELU) followed by a
bidirectional GRU stack; decoder: one unidirectional GRU with additive
attention over the encoder states; character-level output vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoders import GRULayerParams, gru_cell, run_gru_layer, uniform_init

SOS = "<s>"
EOS = "</s>"


@dataclass
class Vocabulary:
    tokens: list[str]

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Vocabulary":
        chars = sorted({c for t in texts for c in t})
        return cls([SOS, EOS] + chars)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index[c] for c in text]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i >= 2)


@dataclass
class Seq2SeqConfig:
    input_dim: int = 512            # representation width fed to the encoder
    conv_channels: int = 256
    conv_kernel: int = 3
    encoder_layers: int = 4
    encoder_hidden: int = 256       # per direction
    decoder_hidden: int = 256
    attention_dim: int = 128
    embed_dim: int = 64
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0


def conv_downsample(x, w, b, kernel: int, stride: int = 2) -> T.DiffValue:
    """1-D convolution over time via gathered windows; zero-padded so the
    output length is ceil(N / stride)."""
    n = T._value(x).shape[0]
    pad = (kernel - 1) // 2
    padded = T.pad_axis(x, 0, pad, pad)
    starts = np.arange(0, n, stride)
    window_idx = (starts[:, None] + np.arange(kernel)[None, :]).ravel()
    windows = T.take(padded, window_idx, axis=0)
    flat = T.reshape(windows, (len(starts), kernel * T._value(x).shape[1]))
    return T.gelu(T.add(T.matmul(flat, w), b))


class Seq2SeqModel:
    def __init__(self, cfg: Seq2SeqConfig, vocab: Vocabulary,
                 rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.vocab = vocab
        c, k = cfg.conv_channels, cfg.conv_kernel
        w = lambda fan, shape: T.DiffValue(uniform_init(rng, fan, shape, dtype))
        zeros = lambda shape: T.DiffValue(np.zeros(shape, dtype=dtype))

        self.conv1_w = w(k * cfg.input_dim, (k * cfg.input_dim, c))
        self.conv1_b = zeros(c)
        self.conv2_w = w(k * c, (k * c, c))
        self.conv2_b = zeros(c)

        self.enc_fwd, self.enc_bwd = [], []
        in_dim = c
        for _ in range(cfg.encoder_layers):
            self.enc_fwd.append(GRULayerParams.create(rng, in_dim, cfg.encoder_hidden, dtype))
            self.enc_bwd.append(GRULayerParams.create(rng, in_dim, cfg.encoder_hidden, dtype))
            in_dim = 2 * cfg.encoder_hidden
        enc_out = in_dim

        self.embed = w(cfg.embed_dim, (len(vocab), cfg.embed_dim))
        self.dec_gru = GRULayerParams.create(
            rng, cfg.embed_dim + enc_out, cfg.decoder_hidden, dtype)
        self.attn_enc = w(enc_out, (enc_out, cfg.attention_dim))
        self.attn_dec = w(cfg.decoder_hidden, (cfg.decoder_hidden, cfg.attention_dim))
        self.attn_bias = zeros(cfg.attention_dim)
        self.attn_v = w(cfg.attention_dim, (cfg.attention_dim, 1))
        self.out_w = w(cfg.decoder_hidden + enc_out,
                       (cfg.decoder_hidden + enc_out, len(vocab)))
        self.out_b = zeros(len(vocab))

    def named_params(self) -> dict[str, T.DiffValue]:
        out = {"conv1.w": self.conv1_w, "conv1.b": self.conv1_b,
               "conv2.w": self.conv2_w, "conv2.b": self.conv2_b}
        for i, (f, b) in enumerate(zip(self.enc_fwd, self.enc_bwd)):
            out.update(f.named(f"enc.{i}.fwd"))
            out.update(b.named(f"enc.{i}.bwd"))
        out.update(self.dec_gru.named("dec.gru"))
        out.update({"dec.embed": self.embed, "attn.enc": self.attn_enc,
                    "attn.dec": self.attn_dec, "attn.bias": self.attn_bias,
                    "attn.v": self.attn_v, "out.w": self.out_w, "out.b": self.out_b})
        return out

    def parameters(self) -> list[T.DiffValue]:
        return list(self.named_params().values())

    def encode(self, rep) -> T.DiffValue:
        """[N x input_dim] representation -> [ceil(ceil(N/2)/2) x 2H] states."""
        h = conv_downsample(rep, self.conv1_w, self.conv1_b, self.cfg.conv_kernel)
        h = conv_downsample(h, self.conv2_w, self.conv2_b, self.cfg.conv_kernel)
        steps = [T.narrow(h, 0, t, 1) for t in range(T._value(h).shape[0])]
        for fwd, bwd in zip(self.enc_fwd, self.enc_bwd):
            forward = run_gru_layer(steps, fwd)
            backward = run_gru_layer(steps, bwd, reverse=True)
            steps = [T.concat([f, b], axis=1) for f, b in zip(forward, backward)]
        return T.concat(steps, axis=0)

    def attend(self, enc_states, enc_proj, state) -> tuple[T.DiffValue, T.DiffValue]:
        """Additive attention; returns (context [1 x 2H], weights [T x 1])."""
        scores = T.matmul(T.tanh(T.add(T.add(enc_proj, T.matmul(state, self.attn_dec)),
                                       self.attn_bias)), self.attn_v)
        weights = T.softmax(scores, axis=0)
        context = T.matmul(T.swapaxes(weights, 0, 1), enc_states)
        return context, weights

    def decode_step(self, token: int, state, enc_states, enc_proj):
        """One teacher-forced step; returns (log-probs [1 x V], new state, weights)."""
        context, weights = self.attend(enc_states, enc_proj, state)
        emb = T.take(self.embed, np.array([token]), axis=0)
        inp = T.concat([emb, context], axis=1)
        new_state = gru_cell(inp, state, self.dec_gru)
        logits = T.add(T.matmul(T.concat([new_state, context], axis=1), self.out_w),
                       self.out_b)
        return T.log_softmax(logits, axis=1), new_state, weights

    def forward(self, rep, targets: Sequence[int]):
        """Teacher-forced log-probs for each target position (EOS included).

        Returns (per-step log-prob rows, attention weight rows).
        """
        if len(targets) == 0:
            raise ValueError("empty target sequence")
        enc_states = self.encode(rep)
        enc_proj = T.matmul(enc_states, self.attn_enc)
        dtype = self.out_w.value.dtype
        state = np.zeros((1, self.cfg.decoder_hidden), dtype=dtype)
        prev = self.vocab.index[SOS]
        log_rows, attn_rows = [], []
        for tok in list(targets) + [self.vocab.index[EOS]]:
            lp, state, weights = self.decode_step(prev, state, enc_states, enc_proj)
            log_rows.append(lp)
            attn_rows.append(weights)
            prev = tok
        return log_rows, attn_rows

    def loss(self, rep, targets: Sequence[int]) -> T.DiffValue:
        """Mean NLL of the gold sequence under teacher forcing."""
        log_rows, _ = self.forward(rep, targets)
        gold = list(targets) + [self.vocab.index[EOS]]
        total = None
        for lp, tok in zip(log_rows, gold):
            nll = T.neg(T.sum_(T.narrow(lp, 1, tok, 1)))
            total = nll if total is None else T.add(total, nll)
        return T.mul(total, 1.0 / len(gold))

    def greedy_cer(self, rep, targets: Sequence[int]) -> float:
        """Teacher-forced per-position error against the gold sequence."""
        with T.no_grad():
            log_rows, _ = self.forward(rep, targets)
        gold = list(targets) + [self.vocab.index[EOS]]
        wrong = sum(int(lp.value.argmax()) != tok for lp, tok in zip(log_rows, gold))
        return wrong / len(gold)


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    state: np.ndarray
    finished: bool = False


def beam_decode(model: Seq2SeqModel, rep, beam_size: int = 5,
                max_len: int = 50) -> Hypothesis:
    """Length-bounded beam search over output tokens.

    Keeps the ``beam_size`` best partial hypotheses by cumulative
    log-probability; a hypothesis completes on EOS. With beam_size 1 this
    is exactly greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    eos = model.vocab.index[EOS]
    with T.no_grad():
        enc_states = model.encode(rep)
        enc_proj = T.matmul(enc_states, model.attn_enc)
        dtype = model.out_w.value.dtype
        start = Hypothesis([], 0.0, np.zeros((1, model.cfg.decoder_hidden), dtype=dtype))
        beams = [start]
        completed: list[Hypothesis] = []
        for _ in range(max_len):
            candidates: list[Hypothesis] = []
            for hyp in beams:
                prev = hyp.tokens[-1] if hyp.tokens else model.vocab.index[SOS]
                lp, state, _ = model.decode_step(prev, hyp.state, enc_states, enc_proj)
                row = lp.value[0]
                top = np.argsort(row)[::-1][:beam_size]
                for tok in top:
                    candidates.append(Hypothesis(
                        hyp.tokens + [int(tok)], hyp.log_prob + float(row[tok]),
                        state.value, finished=(int(tok) == eos)))
            candidates.sort(key=lambda h: h.log_prob, reverse=True)
            beams = []
            for cand in candidates:
                if cand.finished:
                    completed.append(cand)
                else:
                    beams.append(cand)
                if len(beams) >= beam_size:
                    break
            if not beams:
                break
        completed.extend(beams)  # length-bounded leftovers
    return max(completed, key=lambda h: h.log_prob)


def train_seq2seq(model: Seq2SeqModel, dataset, optimizer, steps: int,
                  seed: int = 0) -> list[float]:
    """Teacher-forced training over (representation, token-ids) pairs.

    ``dataset`` items supply .frames arrays (or plain arrays) and encoded
    targets; returns the per-step mean losses.
    """
    rng = np.random.default_rng(seed)
    losses = []
    n = len(dataset)
    for step in range(steps):
        batch = rng.choice(n, size=min(model.cfg.batch_size, n), replace=False)
        total = None
        for i in batch:
            rep, targets = dataset[i]
            frames = rep.frames if hasattr(rep, "frames") else rep
            term = model.loss(frames, targets)
            total = term if total is None else T.add(total, term)
        loss = T.mul(total, 1.0 / len(batch))
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError("non-finite transduction loss; diverged")
        optimizer.zero_grad()
        T.backward(loss)
        optimizer.step()
        losses.append(value)
    return losses
