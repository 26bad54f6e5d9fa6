"""Experiment runner: configuration, the epoch loop, JSON-lines metrics,
and checkpoint/resume plumbing shared by both pre-training objectives."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import apc, cpc
from . import tensor as T
from .container import ConfigMismatchError, checkpoint_load, checkpoint_save
from .encoders import RNNConfig, RNNEncoder, TransformerConfig, TransformerEncoder
from .errors import ConfigError
from .optim import Adam, make_batches

logger = logging.getLogger(__name__)

LATEST = "checkpoint_latest.apct"


@dataclass
class RunConfig:
    """Everything a pre-training run needs; round-trips through JSON and
    the checkpoint metadata."""

    seed: int = 0
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    objective: str = "apc"          # apc | cpc
    encoder: str = "rnn"            # rnn | transformer
    n: int = 3
    input_dim: int = 80
    layers: int = 4
    hidden: int = 512
    d_model: int = 512
    heads: int = 8
    ffn_hidden: int = 2048
    negatives: int = 10             # cpc only
    strategy: str = cpc.OTHER_UTTERANCES
    embed_dim: int = 64             # cpc only
    checkpoint_every: int = 1       # epochs

    def __post_init__(self):
        if self.objective not in ("apc", "cpc"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.encoder not in ("rnn", "transformer"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.n < 1:
            raise ConfigError(f"prediction step n must be >= 1, got {self.n}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(record) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**record)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_model(cfg: RunConfig, rng: np.random.Generator, dtype=np.float32):
    """Instantiate the model a RunConfig describes."""
    if cfg.objective == "cpc":
        return cpc.CPCModel(cpc.CPCConfig(
            n=cfg.n, negatives=cfg.negatives, strategy=cfg.strategy,
            input_dim=cfg.input_dim, embed_dim=cfg.embed_dim,
            layers=cfg.layers, hidden=cfg.hidden), rng, dtype)
    if cfg.encoder == "rnn":
        return RNNEncoder(RNNConfig(input_dim=cfg.input_dim, layers=cfg.layers,
                                    hidden=cfg.hidden), rng, dtype)
    return TransformerEncoder(TransformerConfig(
        input_dim=cfg.input_dim, blocks=cfg.layers, d_model=cfg.d_model,
        heads=cfg.heads, ffn_hidden=cfg.ffn_hidden), rng, dtype)


class JsonlLogger:
    """Append-only JSON-lines metrics log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_params_into(model, params: dict[str, np.ndarray]) -> None:
    named = model.named_params()
    missing = set(named) - set(params)
    extra = set(params) - set(named)
    if missing or extra:
        raise ConfigError(f"checkpoint tensors do not match model: "
                          f"missing {sorted(missing)}, extra {sorted(extra)}")
    for name, p in named.items():
        if p.value.shape != params[name].shape:
            raise ConfigError(f"tensor {name!r} shape {params[name].shape} "
                              f"does not match model {p.value.shape}")
        p.value[...] = params[name]


def run_experiment(cfg: RunConfig, features, out_dir, resume: bool = False) -> Path:
    """Pre-train per the config; checkpoint each epoch; resumable.

    Returns the path of the final checkpoint. Resuming from the latest
    checkpoint continues the uninterrupted trajectory because batch order
    depends only on (seed, epoch) and optimizer state rides along.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, np.random.default_rng(cfg.seed))
    adam = Adam(model.named_params(), lr=cfg.lr)
    start_epoch = 0
    step = 0

    latest = out / LATEST
    if resume and latest.exists():
        ck = checkpoint_load(latest)
        stored = {k: v for k, v in ck.config.items() if k != "epochs"}
        wanted = {k: v for k, v in cfg.to_dict().items() if k != "epochs"}
        if stored != wanted:
            diff = {k for k in set(stored) | set(wanted) if stored.get(k) != wanted.get(k)}
            raise ConfigMismatchError(f"resume config differs on fields {sorted(diff)}")
        load_params_into(model, ck.params)
        adam.load_state(ck.opt_tensors, ck.step)
        start_epoch = ck.epoch + 1
        step = ck.step
        logger.info("resumed from %s at epoch %d", latest, start_epoch)

    log = JsonlLogger(out / "metrics.jsonl")
    lengths = [f.num_frames for f in features]
    t0 = time.time()
    for epoch in range(start_epoch, cfg.epochs):
        plan = make_batches(lengths, cfg.batch_size, seed=cfg.seed, epoch=epoch)
        cpc_rng = np.random.default_rng((cfg.seed, epoch, 31337))
        for batch_idx in plan.batches:
            group = [features[i] for i in batch_idx]
            if cfg.objective == "apc":
                batch = apc.make_batch(group, cfg.n)
                if batch is None:
                    continue
                stats = apc.pretrain_step(batch, model, adam)
            else:
                stats = cpc.pretrain_step(group, model, adam, cpc_rng)
            step += 1
            log.write({"step": step, "epoch": epoch,
                       "loss_sum": stats["loss_sum"],
                       "loss_mean": stats["loss_mean"],
                       "wall_time": time.time() - t0})
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
            checkpoint_save(latest, cfg.to_dict(),
                            {k: p.value for k, p in model.named_params().items()},
                            adam.state_tensors(), step=step, epoch=epoch)
    final = out / "checkpoint_final.apct"
    checkpoint_save(final, cfg.to_dict(),
                    {k: p.value for k, p in model.named_params().items()},
                    adam.state_tensors(), step=step, epoch=cfg.epochs - 1)
    return final


def load_encoder(path, dtype=np.float32):
    """Rebuild the encoder (or CPC model) a checkpoint was trained with."""
    ck = checkpoint_load(path)
    cfg = RunConfig.from_dict(ck.config)
    model = build_model(cfg, np.random.default_rng(cfg.seed), dtype)
    load_params_into(model, ck.params)
    return model, cfg
