"""Future-frame prediction objective: regress the frame n steps ahead
under an L1 loss, computed only on valid (non-padded) positions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .dsp import FeatureSequence
from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class APCConfig:
    n: int = 3                      # how many steps ahead to predict
    encoder: str = "rnn"            # rnn | transformer
    encoder_args: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"prediction step n must be >= 1, got {self.n}")
        if self.encoder not in ("rnn", "transformer"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")


@dataclass
class APCBatch:
    """Padded input block plus aligned targets; frames past each valid
    length are zero and excluded from the loss."""

    inputs: np.ndarray              # [B x T_max x d]
    targets: np.ndarray             # [B x T_max x d]
    lengths: list[int]              # valid rows per utterance
    utterance_ids: list[str]

    @property
    def mask(self) -> np.ndarray:
        b, t = self.inputs.shape[:2]
        m = np.zeros((b, t), dtype=self.inputs.dtype)
        for i, n in enumerate(self.lengths):
            m[i, :n] = 1.0
        return m

    @property
    def valid_frames(self) -> int:
        return sum(self.lengths)


def shift_targets(frames: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray] | None:
    """Split an [N x d] utterance into (inputs, targets) with targets_i = x_{i+n}.

    Returns None (with a logged warning) when the utterance is too short
    to produce a single pair.
    """
    frames = np.asarray(frames)
    if n < 1:
        raise ConfigError(f"prediction step n must be >= 1, got {n}")
    if frames.shape[0] <= n:
        logger.warning("utterance with %d frames too short for n=%d, skipping",
                       frames.shape[0], n)
        return None
    return frames[:-n], frames[n:]


def make_batch(features: Sequence[FeatureSequence], n: int,
               dtype=np.float32) -> APCBatch | None:
    """Shift every utterance, drop the too-short ones, pad to a block."""
    pairs, lengths, ids = [], [], []
    for f in features:
        shifted = shift_targets(f.frames, n)
        if shifted is None:
            continue
        pairs.append(shifted)
        lengths.append(shifted[0].shape[0])
        ids.append(f.utterance_id)
    if not pairs:
        return None
    t_max = max(lengths)
    d = pairs[0][0].shape[1]
    inputs = np.zeros((len(pairs), t_max, d), dtype=dtype)
    targets = np.zeros((len(pairs), t_max, d), dtype=dtype)
    for i, (inp, tgt) in enumerate(pairs):
        inputs[i, :lengths[i]] = inp
        targets[i, :lengths[i]] = tgt
    return APCBatch(inputs, targets, lengths, ids)


def apc_loss(y, t, mask=None) -> T.DiffValue:
    """Sum of absolute differences over valid positions.

    ``mask`` broadcasts against the element shape; None means all valid.
    """
    yv, tv = T._value(y), T._value(t)
    if yv.shape != tv.shape:
        raise T.ShapeError(f"prediction shape {yv.shape} != target shape {tv.shape}")
    diff = T.abs_(T.sub(y, t))
    if mask is not None:
        diff = T.mul(diff, mask)
    return T.sum_(diff)


def batch_loss(encoder, batch: APCBatch) -> tuple[T.DiffValue, int]:
    """Masked L1 over a batch; returns (sum loss, valid frame count).

    The GRU encoder runs one batched recurrence over the padded block;
    the Transformer processes utterances at their true lengths.
    """
    if encoder.kind == "rnn":
        mask = batch.mask
        preds, _ = encoder.forward_steps(batch.inputs)
        terms = []
        for t, y_t in enumerate(preds):
            active = mask[:, t:t + 1]
            if not active.any():
                continue
            terms.append(apc_loss(y_t, batch.targets[:, t, :], active))
        total = terms[0]
        for term in terms[1:]:
            total = T.add(total, term)
        return total, batch.valid_frames

    total = None
    for i, n_valid in enumerate(batch.lengths):
        out = encoder.forward(batch.inputs[i, :n_valid])
        term = apc_loss(out.predictions, batch.targets[i, :n_valid])
        total = term if total is None else T.add(total, term)
    return total, batch.valid_frames


def pretrain_step(batch: APCBatch, encoder, optimizer) -> dict:
    """One forward/backward/update cycle; optimizes the per-frame-per-dim
    mean so the learning rate is length-invariant, reports the sum too."""
    dim = batch.inputs.shape[2]
    total, frames = batch_loss(encoder, batch)
    loss_sum = total.item()
    if not np.isfinite(loss_sum):
        raise FloatingPointError(f"non-finite training loss {loss_sum}; diverged")
    mean = T.mul(total, 1.0 / (frames * dim))
    optimizer.zero_grad()
    T.backward(mean)
    optimizer.step()
    return {"loss_sum": loss_sum, "loss_mean": loss_sum / (frames * dim),
            "frames": frames}


def repeat_last_frame_l1(features: Sequence[FeatureSequence], n: int) -> float:
    """Per-frame-per-dim L1 of the trivial predictor that emits x_k as the
    estimate of x_{k+n}; the floor a useful model must beat."""
    total, count = 0.0, 0
    for f in features:
        shifted = shift_targets(f.frames, n)
        if shifted is None:
            continue
        inputs, targets = shifted
        total += np.abs(targets - inputs).sum()
        count += targets.size
    if count == 0:
        raise ValueError("no utterance long enough for the baseline")
    return total / count


def evaluate_l1(encoder, features: Sequence[FeatureSequence], n: int) -> float:
    """Per-frame-per-dim L1 of the model on held-out utterances."""
    batch = make_batch(features, n)
    if batch is None:
        raise ValueError("no utterance long enough to evaluate")
    with T.no_grad():
        total, frames = batch_loss(encoder, batch)
    return total.item() / (frames * batch.inputs.shape[2])
