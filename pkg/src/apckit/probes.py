"""Transfer learning probes: representation extraction, a speaker
classifier on frozen or fine-tuned features, and error-rate metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .dsp import FeatureSequence
from .encoders import GRULayerParams, gru_cell, uniform_init
from .optim import Adam, make_batches

logger = logging.getLogger(__name__)


@dataclass
class TransferMode:
    frozen: bool = True


@dataclass
class ProbeDataset:
    """Labeled (sequence, label) pairs; labels are one value per utterance
    for classification or a token sequence for transduction."""

    items: list[tuple[FeatureSequence, object]]
    label_kind: str = "single"      # single | sequence

    @property
    def size(self) -> int:
        return len(self.items)


def extract(encoder, frames: np.ndarray) -> np.ndarray:
    """Last-layer representation of one utterance, with no gradient graph."""
    with T.no_grad():
        return encoder.forward(np.asarray(frames)).last_layer.value.copy()


@dataclass
class SpeakerProbeConfig:
    hidden: int = 512
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 200
    seed: int = 0


class SpeakerProbe:
    """Single GRU layer over the representation, softmax over speakers
    read from the final time step."""

    def __init__(self, input_dim: int, speakers: list[str], cfg: SpeakerProbeConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.speakers = list(speakers)
        self.gru = GRULayerParams.create(rng, input_dim, cfg.hidden, dtype)
        self.w_out = T.DiffValue(uniform_init(rng, cfg.hidden, (cfg.hidden, len(speakers)), dtype))
        self.b_out = T.DiffValue(np.zeros(len(speakers), dtype=dtype))

    def named_params(self) -> dict[str, T.DiffValue]:
        out = self.gru.named("probe.gru")
        out["probe.w_out"] = self.w_out
        out["probe.b_out"] = self.b_out
        return out

    def log_probs(self, rep) -> T.DiffValue:
        """[1 x n_speakers] log-probabilities from an [N x d] representation."""
        rv = T._value(rep)
        h = np.zeros((1, self.cfg.hidden), dtype=self.gru.u_r.value.dtype)
        state = h
        for t in range(rv.shape[0]):
            step = T.narrow(rep, 0, t, 1) if isinstance(rep, T.DiffValue) else rv[t:t + 1]
            state = gru_cell(step, state, self.gru)
        logits = T.add(T.matmul(state, self.w_out), self.b_out)
        return T.log_softmax(logits, axis=1)

    def predict(self, rep: np.ndarray) -> str:
        with T.no_grad():
            lp = self.log_probs(rep).value
        return self.speakers[int(lp.argmax())]


def cap_per_speaker(features: Sequence[FeatureSequence],
                    utts_per_speaker: int | None) -> list[FeatureSequence]:
    """Deterministically keep the first m utterances per speaker (sorted by
    utterance id); every speaker must have at least m."""
    if utts_per_speaker is None:
        return list(features)
    by_speaker: dict[str, list[FeatureSequence]] = {}
    for f in sorted(features, key=lambda f: f.utterance_id):
        by_speaker.setdefault(f.speaker_id, []).append(f)
    capped = []
    for spk, group in sorted(by_speaker.items()):
        if len(group) < utts_per_speaker:
            raise ValueError(
                f"speaker {spk!r} has {len(group)} utterances, fewer than the "
                f"{utts_per_speaker}-per-speaker cap")
        capped.extend(group[:utts_per_speaker])
    return capped


def train_speaker_probe(encoder, train_features: Sequence[FeatureSequence],
                        eval_features: Sequence[FeatureSequence],
                        mode: TransferMode, cfg: SpeakerProbeConfig,
                        utts_per_speaker: int | None = None) -> tuple[SpeakerProbe, float]:
    """Fit the speaker classifier, return it with held-out top-1 accuracy.

    Frozen mode precomputes representations once and never touches the
    encoder; fine-tuned mode rebuilds the encoder graph every step and
    updates its parameters jointly.
    """
    train = cap_per_speaker(train_features, utts_per_speaker)
    speakers = sorted({f.speaker_id for f in train})
    missing = {f.speaker_id for f in eval_features} - set(speakers)
    if missing:
        raise ValueError(f"speakers in eval but not in training: {sorted(missing)}")
    index = {s: i for i, s in enumerate(speakers)}

    rng = np.random.default_rng(cfg.seed)
    probe = SpeakerProbe(encoder.output_width, speakers, cfg, rng,
                         dtype=next(iter(encoder.parameters())).value.dtype)
    params = probe.named_params()
    if not mode.frozen:
        params.update(encoder.named_params())
    adam = Adam(params, lr=cfg.lr)

    cached = [extract(encoder, f.frames) for f in train] if mode.frozen else None

    lengths = [f.num_frames for f in train]
    step = 0
    epoch = 0
    while step < cfg.steps:
        plan = make_batches(lengths, cfg.batch_size, seed=cfg.seed, epoch=epoch)
        epoch += 1
        for batch in plan.batches:
            total = None
            for i in batch:
                if mode.frozen:
                    rep = cached[i]
                else:
                    rep = encoder.forward(train[i].frames).last_layer
                lp = probe.log_probs(rep)
                nll = T.neg(T.sum_(T.narrow(lp, 1, index[train[i].speaker_id], 1)))
                total = nll if total is None else T.add(total, nll)
            loss = T.mul(total, 1.0 / len(batch))
            if not np.isfinite(loss.item()):
                raise FloatingPointError("non-finite probe loss; diverged")
            adam.zero_grad()
            T.backward(loss)
            adam.step()
            step += 1
            if step >= cfg.steps:
                break

    correct = 0
    for f in eval_features:
        rep = extract(encoder, f.frames)
        if probe.predict(rep) == f.speaker_id:
            correct += 1
    accuracy = correct / max(1, len(eval_features))
    return probe, accuracy


# ---------------------------------------------------------------------------
# Error-rate metrics
# ---------------------------------------------------------------------------

def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion cost."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i]
        for j, r in enumerate(ref, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r)))
        prev = cur
    return prev[-1]


def tokenize(text, unit: str) -> list[str]:
    if not isinstance(text, str):
        return list(text)
    if unit == "word":
        return text.split()
    if unit == "char":
        return list(text)
    raise ValueError(f"unknown unit {unit!r}")


def error_rate(hyp, ref, unit: str = "word") -> float:
    """Levenshtein distance over units divided by reference length."""
    hyp_tokens = tokenize(hyp, unit)
    ref_tokens = tokenize(ref, unit)
    if not ref_tokens:
        raise ValueError("empty reference")
    return edit_distance(hyp_tokens, ref_tokens) / len(ref_tokens)
