"""Contrastive baseline: instead of regressing the future frame, score it
against sampled negative frames and minimize InfoNCE.

The context network is a GRU of the same family and width as the
recurrent predictive model, so comparisons isolate the objective. Frame
embeddings are a linear projection of the (log-Mel) frame itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .dsp import FeatureSequence
from .encoders import GRULayerParams, run_gru_layer, uniform_init
from .errors import ConfigError

logger = logging.getLogger(__name__)

SAME_UTTERANCE = "same_utterance"
OTHER_UTTERANCES = "same_batch_other_utterances"


@dataclass
class CPCConfig:
    n: int = 3                      # prediction step
    negatives: int = 10             # K
    strategy: str = OTHER_UTTERANCES
    input_dim: int = 80
    embed_dim: int = 64             # frame-embedding width
    layers: int = 1
    hidden: int = 512

    def __post_init__(self):
        if self.negatives < 1:
            raise ConfigError(f"need at least one negative, got {self.negatives}")
        if self.strategy not in (SAME_UTTERANCE, OTHER_UTTERANCES):
            raise ConfigError(f"unknown sampling strategy {self.strategy!r}")


@dataclass
class NegativeSet:
    """Sampled negative frames for one anchor: (utterance, frame) positions."""

    positions: list[tuple[int, int]]
    anchor_utterance: int
    positive_frame: int

    def __post_init__(self):
        assert (self.anchor_utterance, self.positive_frame) not in self.positions, \
            "negative set contains the positive frame"


def sample_negatives(lengths: Sequence[int], anchor_utt: int, anchor_pos: int,
                     cfg: CPCConfig, rng: np.random.Generator) -> NegativeSet:
    """Draw K distinct frames uniformly under the configured strategy,
    never including the positive frame at (anchor_utt, anchor_pos + n)."""
    positive = anchor_pos + cfg.n
    if cfg.strategy == SAME_UTTERANCE:
        candidates = [(anchor_utt, f) for f in range(lengths[anchor_utt]) if f != positive]
    else:
        candidates = [(u, f) for u in range(len(lengths)) if u != anchor_utt
                      for f in range(lengths[u])]
    if len(candidates) < cfg.negatives:
        raise ValueError(
            f"only {len(candidates)} candidate frames for K={cfg.negatives} "
            f"negatives under {cfg.strategy}; use a larger batch or smaller K")
    chosen = rng.choice(len(candidates), size=cfg.negatives, replace=False)
    return NegativeSet([candidates[i] for i in chosen], anchor_utt, positive)


def infonce_loss(context, positive, negatives, w_step) -> T.DiffValue:
    """Cross-entropy of the positive among {positive} + negatives under the
    bilinear score z . (c W)."""
    proj = T.matmul(context, w_step)                       # [1 x e]
    cand = T.concat([positive, negatives], axis=0)         # [(K+1) x e]
    scores = T.matmul(proj, T.swapaxes(cand, 0, 1))        # [1 x (K+1)]
    return T.neg(T.sum_(T.narrow(T.log_softmax(scores, axis=1), 1, 0, 1)))


class CPCModel:
    """Linear frame embedding, causal GRU context network, and a step
    projection scoring contexts against future-frame embeddings."""

    def __init__(self, cfg: CPCConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.w_embed = T.DiffValue(uniform_init(rng, cfg.input_dim,
                                                (cfg.input_dim, cfg.embed_dim), dtype))
        self.layers = []
        in_dim = cfg.input_dim
        for _ in range(cfg.layers):
            self.layers.append(GRULayerParams.create(rng, in_dim, cfg.hidden, dtype))
            in_dim = cfg.hidden
        self.w_step = T.DiffValue(uniform_init(rng, cfg.hidden,
                                               (cfg.hidden, cfg.embed_dim), dtype))

    def named_params(self) -> dict[str, T.DiffValue]:
        out = {"embed.w": self.w_embed}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"context.{i}"))
        out["step.w"] = self.w_step
        return out

    def parameters(self) -> list[T.DiffValue]:
        return list(self.named_params().values())

    def context_steps(self, block: np.ndarray) -> list:
        """Per-timestep context states for a padded [B x T x d] block."""
        seq: list = [np.ascontiguousarray(block[:, t, :]) for t in range(block.shape[1])]
        for layer in self.layers:
            seq = run_gru_layer(seq, layer)
        return seq

    @property
    def output_width(self) -> int:
        return self.cfg.hidden

    def forward(self, frames: np.ndarray):
        """Expose context states in the encoder-output shape so frozen
        probes can consume contrastive features too."""
        from .encoders import EncoderOutput  # local import avoids a cycle at load
        frames = np.asarray(frames, dtype=self.w_embed.value.dtype)
        steps = self.context_steps(frames[None, :, :])
        h = T.concat(steps, axis=0)
        return EncoderOutput(layers=[h], predictions=h)


def batch_infonce(model: CPCModel, features: Sequence[FeatureSequence],
                  rng: np.random.Generator) -> tuple[T.DiffValue, int]:
    """Mean InfoNCE over every valid anchor in the batch.

    Builds one vectorized graph: all frame embeddings at once, contexts
    from one batched recurrence, candidate rows gathered per anchor.
    """
    cfg = model.cfg
    lengths = [f.num_frames for f in features]
    usable = [i for i, n in enumerate(lengths) if n > cfg.n]
    if not usable:
        raise ValueError(f"no utterance longer than n={cfg.n} frames")

    dtype = model.w_embed.value.dtype
    b = len(features)
    t_max = max(lengths)
    block = np.zeros((b, t_max, cfg.input_dim), dtype=dtype)
    for i, f in enumerate(features):
        block[i, :lengths[i]] = f.frames

    stacked = np.concatenate([f.frames for f in features], axis=0).astype(dtype)
    offsets = np.cumsum([0] + lengths[:-1])
    z_all = T.matmul(stacked, model.w_embed)               # [(sum N) x e]

    steps = model.context_steps(block)                     # T_max x [B x h]
    contexts = T.concat(steps, axis=0)                     # [(T_max*B) x h], row t*B+u

    anchor_rows, cand_rows = [], []
    for u in usable:
        for k in range(lengths[u] - cfg.n):
            neg = sample_negatives(lengths, u, k, cfg, rng)
            anchor_rows.append(k * b + u)
            cand_rows.append([offsets[u] + k + cfg.n] +
                             [offsets[uu] + ff for uu, ff in neg.positions])
    a = len(anchor_rows)

    proj = T.matmul(T.take(contexts, np.asarray(anchor_rows)), model.w_step)  # [A x e]
    cand = T.take(z_all, np.asarray(cand_rows).ravel())    # [A*(K+1) x e]
    cand = T.reshape(cand, (a, cfg.negatives + 1, cfg.embed_dim))
    scores = T.reshape(T.matmul(T.reshape(proj, (a, 1, cfg.embed_dim)),
                                T.swapaxes(cand, 1, 2)), (a, cfg.negatives + 1))
    log_probs = T.narrow(T.log_softmax(scores, axis=1), 1, 0, 1)
    return T.mul(T.sum_(log_probs), -1.0 / a), a


def pretrain_step(features: Sequence[FeatureSequence], model: CPCModel,
                  optimizer, rng: np.random.Generator) -> dict:
    """One contrastive update over all valid anchors of the batch."""
    loss, anchors = batch_infonce(model, features, rng)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite contrastive loss {value}; diverged")
    optimizer.zero_grad()
    T.backward(loss)
    optimizer.step()
    return {"loss_mean": value, "loss_sum": value * anchors, "anchors": anchors}
