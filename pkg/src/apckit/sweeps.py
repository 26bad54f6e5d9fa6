"""Protocol sweeps: prediction-step grid, downstream data fraction,
downstream encoder depth, and utterances-per-speaker. Each runner trains
one probe per cell and emits a fixed-layout table for inspection.

Budgets (steps, widths) come from SweepSettings so the same grids run at
desk scale in tests and at larger scale from the scripts.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import apc
from . import tensor as T
from .encoders import RNNConfig, RNNEncoder, TransformerConfig, TransformerEncoder
from .optim import Adam, make_batches
from .probes import (SpeakerProbeConfig, TransferMode, error_rate, extract,
                     train_speaker_probe)
from .seq2seq import Seq2SeqConfig, Seq2SeqModel, Vocabulary, beam_decode, train_seq2seq

logger = logging.getLogger(__name__)

N_GRID = (1, 2, 3, 5, 10, 20)
FRACTION_GRID = (1, 2, 4, 8, 16, 32)      # denominators: 1, 1/2, ..., 1/32
DEPTH_GRID = (1, 2, 3, 4)
UTTS_GRID = (1, 5, 10, 20, 50, "full")


@dataclass
class SweepSettings:
    seed: int = 0
    encoder: str = "rnn"
    layers: int = 2
    hidden: int = 64
    d_model: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    pretrain_steps: int = 200
    pretrain_batch: int = 8
    lr: float = 1e-3
    s2s_steps: int = 300
    s2s_channels: int = 32
    s2s_hidden: int = 32
    s2s_layers: int = 1
    s2s_batch: int = 8
    beam: int = 5
    probe_steps: int = 150
    probe_hidden: int = 64
    probe_batch: int = 8


@dataclass
class SweepReport:
    protocol: str
    header: list[str]
    rows: list[list]
    cells: list[dict] = field(default_factory=list)

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(str(h) for h in self.header) + "\n")
            for row in self.rows:
                fh.write("\t".join(str(v) for v in row) + "\n")

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for cell in self.cells:
                fh.write(json.dumps(cell, sort_keys=True) + "\n")


def _fmt(value) -> str:
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def pretrain_encoder(features, n: int, settings: SweepSettings):
    """Step-budgeted predictive pre-training for one sweep cell."""
    rng = np.random.default_rng(settings.seed)
    dim = features[0].dim
    if settings.encoder == "rnn":
        encoder = RNNEncoder(RNNConfig(input_dim=dim, layers=settings.layers,
                                       hidden=settings.hidden), rng)
    else:
        encoder = TransformerEncoder(TransformerConfig(
            input_dim=dim, blocks=settings.layers, d_model=settings.d_model,
            heads=settings.heads, ffn_hidden=settings.ffn_hidden), rng)
    adam = Adam(encoder.named_params(), lr=settings.lr)
    lengths = [f.num_frames for f in features]
    step = epoch = 0
    while step < settings.pretrain_steps:
        plan = make_batches(lengths, settings.pretrain_batch, settings.seed, epoch)
        epoch += 1
        for idx in plan.batches:
            batch = apc.make_batch([features[i] for i in idx], n)
            if batch is None:
                continue
            apc.pretrain_step(batch, encoder, adam)
            step += 1
            if step >= settings.pretrain_steps:
                break
    return encoder


def seq2seq_cer(encoder, train_pairs, eval_pairs, settings: SweepSettings,
                depth: int | None = None, fraction: int = 1) -> float:
    """Frozen-representation transduction probe for one cell; beam-decoded
    character error rate on the held-out pairs.

    ``encoder`` None means raw features (the surface baseline row).
    """
    used = train_pairs[:max(1, len(train_pairs) // fraction)]
    vocab = Vocabulary.from_texts([t for _, t in train_pairs] + [t for _, t in eval_pairs])

    def rep(feats):
        return extract(encoder, feats.frames) if encoder is not None else feats.frames

    train_set = [(rep(f), vocab.encode(t)) for f, t in used]
    eval_set = [(rep(f), t) for f, t in eval_pairs]

    cfg = Seq2SeqConfig(
        input_dim=train_set[0][0].shape[1], conv_channels=settings.s2s_channels,
        encoder_layers=depth if depth is not None else settings.s2s_layers,
        encoder_hidden=settings.s2s_hidden, decoder_hidden=settings.s2s_hidden,
        attention_dim=settings.s2s_hidden, embed_dim=16,
        lr=settings.lr, batch_size=settings.s2s_batch, seed=settings.seed)
    model = Seq2SeqModel(cfg, vocab, np.random.default_rng(settings.seed))
    adam = Adam(model.named_params(), lr=cfg.lr)
    train_seq2seq(model, train_set, adam, steps=settings.s2s_steps, seed=settings.seed)

    total = 0.0
    for frames, text in eval_set:
        hyp = beam_decode(model, frames, beam_size=settings.beam,
                          max_len=2 * len(text) + 5)
        total += error_rate(vocab.decode(hyp.tokens), text, unit="char")
    return total / len(eval_set)


def speaker_accuracy(encoder, train_feats, eval_feats, m, settings: SweepSettings) -> float:
    cfg = SpeakerProbeConfig(hidden=settings.probe_hidden, lr=settings.lr,
                             batch_size=settings.probe_batch,
                             steps=settings.probe_steps, seed=settings.seed)
    cap = None if m == "full" else int(m)
    _, acc = train_speaker_probe(encoder, train_feats, eval_feats,
                                 TransferMode(frozen=True), cfg, utts_per_speaker=cap)
    return acc


def _run_cells(protocol: str, label: str, grid, runner) -> SweepReport:
    """Shared cell loop: deterministic order, failures recorded, sweep continues."""
    report = SweepReport(protocol, ["features"] + [str(g) for g in grid], [])
    values = []
    for cell in grid:
        try:
            value = runner(cell)
        except Exception as exc:  # per-cell failures must not kill the sweep
            logger.exception("sweep cell %s=%s failed", protocol, cell)
            value = f"ERROR: {exc}"
        values.append(value)
        report.cells.append({"protocol": protocol, "cell": str(cell),
                             "value": value if isinstance(value, (int, float)) else str(value)})
    report.rows.append([label] + [_fmt(v) for v in values])
    return report


def run_n_sweep(pretrain_feats, train_pairs, eval_pairs,
                settings: SweepSettings) -> SweepReport:
    """Pre-train once per prediction step n, probe each with the frozen
    transduction model; mirrors the n-column table layout."""
    label = f"{'R' if settings.encoder == 'rnn' else 'T'}-APC Frozen"

    def cell(n):
        encoder = pretrain_encoder(pretrain_feats, n, settings)
        return seq2seq_cer(encoder, train_pairs, eval_pairs, settings)

    return _run_cells("n_sweep", label, N_GRID, cell)


def run_data_fraction(encoder, train_pairs, eval_pairs,
                      settings: SweepSettings) -> SweepReport:
    """Shrink the probe training set by factors of two; floor at one item."""
    header_cells = ["1"] + [f"1/{d}" for d in FRACTION_GRID[1:]]

    def cell(denom):
        return seq2seq_cer(encoder, train_pairs, eval_pairs, settings, fraction=denom)

    report = _run_cells("data_fraction", "frozen", FRACTION_GRID, cell)
    report.header = ["features"] + header_cells
    return report


def run_encoder_depth(encoder, train_pairs, eval_pairs,
                      settings: SweepSettings) -> SweepReport:
    """Vary the probe encoder's GRU depth from 1 to 4 layers."""

    def cell(depth):
        return seq2seq_cer(encoder, train_pairs, eval_pairs, settings, depth=depth)

    return _run_cells("encoder_depth", "frozen", DEPTH_GRID, cell)


def run_utts_per_speaker(encoder, train_feats, eval_feats,
                         settings: SweepSettings) -> SweepReport:
    """Speaker-probe accuracy as the per-speaker training cap grows."""

    def cell(m):
        return speaker_accuracy(encoder, train_feats, eval_feats, m, settings)

    return _run_cells("utts_per_speaker", "frozen", UTTS_GRID, cell)
