"""Command-line interface: features, pretrain, extract, probe, sweep.

Every subcommand is a thin wrapper over library calls; anything the CLI
can do is equally reachable in-process.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cpc, harness, sweeps
from .container import (container_meta, read_feature_cache, write_feature_cache)
from .data import load_waveforms, read_manifest
from .dsp import (FeatureSequence, SpectrogramConfig, apply_speaker_stats,
                  compute_speaker_stats, log_mel)
from .probes import SpeakerProbeConfig, TransferMode, train_speaker_probe
from .sweeps import SweepSettings

logger = logging.getLogger(__name__)


def cmd_features(args) -> int:
    cfg = SpectrogramConfig(window_ms=args.window_ms, hop_ms=args.hop_ms,
                            fft_size=args.fft_size, n_mels=args.n_mels,
                            fmin=args.fmin, fmax=args.fmax)
    waves = load_waveforms(args.manifest)
    feats = [log_mel(w, cfg) for w in waves]
    stats_source = feats
    if args.stats_manifest:
        stats_source = [log_mel(w, cfg) for w in load_waveforms(args.stats_manifest)]
    feats = apply_speaker_stats(feats, compute_speaker_stats(stats_source))
    transcripts = {e.utterance_id: e.transcript
                   for e in read_manifest(args.manifest) if e.transcript}
    write_feature_cache(args.out, feats, dataclasses.asdict(cfg), transcripts)
    logger.info("wrote %d utterances to %s", len(feats), args.out)
    return 0


def _override(cfg_dict: dict, args, fields) -> dict:
    for name in fields:
        value = getattr(args, name, None)
        if value is not None:
            cfg_dict[name] = value
    return cfg_dict


def cmd_pretrain(args) -> int:
    record = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            record = json.load(fh)
    _override(record, args, ("seed", "epochs", "batch_size", "lr", "objective",
                             "encoder", "n", "layers", "hidden", "d_model", "heads",
                             "ffn_hidden", "negatives", "strategy", "embed_dim"))
    features = read_feature_cache(args.features)
    record["input_dim"] = features[0].dim
    cfg = harness.RunConfig.from_dict(record)
    final = harness.run_experiment(cfg, features, args.out, resume=args.resume)
    print(final)
    return 0


def cmd_extract(args) -> int:
    model, _ = harness.load_encoder(args.checkpoint)
    features = read_feature_cache(args.features)
    from .probes import extract
    reps = [FeatureSequence(extract(model, f.frames).astype(np.float32),
                            f.utterance_id, f.speaker_id) for f in features]
    meta = container_meta(args.features)
    write_feature_cache(args.out, reps, {"source_checkpoint": str(args.checkpoint)},
                        meta.get("transcripts") or None)
    logger.info("extracted %d representations to %s", len(reps), args.out)
    return 0


def cmd_probe(args) -> int:
    if args.task == "speaker-id":
        return _probe_speaker(args)
    return _probe_seq2seq(args)


def _split_eval(features, eval_features, holdout: float, seed: int):
    if eval_features:
        return features, read_feature_cache(eval_features)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(features))
    cut = max(1, int(len(features) * holdout))
    eval_set = [features[i] for i in order[:cut]]
    train_set = [features[i] for i in order[cut:]]
    return train_set, eval_set


def _probe_speaker(args) -> int:
    model, _ = harness.load_encoder(args.checkpoint)
    features = read_feature_cache(args.features)
    train_set, eval_set = _split_eval(features, args.eval_features,
                                      args.holdout, args.seed)
    cfg = SpeakerProbeConfig(hidden=args.hidden, lr=args.lr, steps=args.steps,
                             batch_size=args.batch_size, seed=args.seed)
    mode = TransferMode(frozen=not args.finetune)
    _, accuracy = train_speaker_probe(model, train_set, eval_set, mode, cfg,
                                      utts_per_speaker=args.utts_per_speaker)
    result = {"task": "speaker-id", "accuracy": accuracy,
              "frozen": mode.frozen, "utts_per_speaker": args.utts_per_speaker}
    print(json.dumps(result, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n")
    return 0


def _probe_seq2seq(args) -> int:
    from .optim import Adam
    from .probes import error_rate, extract
    from .seq2seq import Seq2SeqConfig, Seq2SeqModel, Vocabulary, beam_decode, train_seq2seq

    model, _ = harness.load_encoder(args.checkpoint) if args.checkpoint else (None, None)
    features = read_feature_cache(args.features)
    transcripts = container_meta(args.features).get("transcripts", {})
    pairs = [(f, transcripts[f.utterance_id]) for f in features
             if f.utterance_id in transcripts]
    if not pairs:
        raise ValueError("no transcripts in the feature cache; rerun features "
                         "with a manifest that carries them")
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(pairs))
    cut = max(1, int(len(pairs) * args.holdout))
    eval_pairs = [pairs[i] for i in order[:cut]]
    train_pairs = [pairs[i] for i in order[cut:]]

    vocab = Vocabulary.from_texts([t for _, t in pairs])

    def rep(f):
        return extract(model, f.frames) if model is not None else f.frames

    train_set = [(rep(f), vocab.encode(t)) for f, t in train_pairs]
    cfg = Seq2SeqConfig(input_dim=train_set[0][0].shape[1],
                        conv_channels=args.channels, encoder_layers=args.depth,
                        encoder_hidden=args.hidden, decoder_hidden=args.hidden,
                        attention_dim=args.hidden, embed_dim=16,
                        lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    s2s = Seq2SeqModel(cfg, vocab, np.random.default_rng(args.seed))
    adam = Adam(s2s.named_params(), lr=cfg.lr)
    train_seq2seq(s2s, train_set, adam, steps=args.steps, seed=args.seed)

    total = 0.0
    for f, text in eval_pairs:
        hyp = beam_decode(s2s, rep(f), beam_size=args.beam, max_len=2 * len(text) + 5)
        total += error_rate(vocab.decode(hyp.tokens), text, unit="char")
    result = {"task": "seq2seq", "cer": total / len(eval_pairs), "beam": args.beam}
    print(json.dumps(result, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n")
    return 0


def cmd_sweep(args) -> int:
    settings = SweepSettings(seed=args.seed, encoder=args.encoder,
                             pretrain_steps=args.pretrain_steps,
                             s2s_steps=args.probe_steps, probe_steps=args.probe_steps,
                             beam=args.beam)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    features = read_feature_cache(args.features)
    transcripts = container_meta(args.features).get("transcripts", {})
    pairs = [(f, transcripts[f.utterance_id]) for f in features
             if f.utterance_id in transcripts]
    rng = np.random.default_rng(args.seed)

    if args.protocol == "utts_per_speaker":
        model, _ = harness.load_encoder(args.checkpoint)
        order = rng.permutation(len(features))
        cut = max(1, len(features) // 5)
        eval_set = [features[i] for i in order[:cut]]
        train_set = [features[i] for i in order[cut:]]
        report = sweeps.run_utts_per_speaker(model, train_set, eval_set, settings)
    else:
        if not pairs:
            raise ValueError("this protocol needs transcripts in the feature cache")
        order = rng.permutation(len(pairs))
        cut = max(1, len(pairs) // 5)
        eval_pairs = [pairs[i] for i in order[:cut]]
        train_pairs = [pairs[i] for i in order[cut:]]
        if args.protocol == "n_sweep":
            report = sweeps.run_n_sweep(features, train_pairs, eval_pairs, settings)
        else:
            model, _ = harness.load_encoder(args.checkpoint)
            if args.protocol == "data_fraction":
                report = sweeps.run_data_fraction(model, train_pairs, eval_pairs, settings)
            else:
                report = sweeps.run_encoder_depth(model, train_pairs, eval_pairs, settings)

    tsv = out_dir / f"{args.protocol}.tsv"
    report.write_tsv(tsv)
    report.write_jsonl(out_dir / f"{args.protocol}.jsonl")
    print(tsv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apckit",
        description="Self-supervised speech representations by future-frame prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="manifest -> log-Mel feature cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats-manifest",
                   help="manifest whose speaker statistics normalize this split")
    p.add_argument("--window-ms", type=float, default=25.0)
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.add_argument("--fft-size", type=int, default=512)
    p.add_argument("--n-mels", type=int, default=80)
    p.add_argument("--fmin", type=float, default=0.0)
    p.add_argument("--fmax", type=float, default=None)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("pretrain", help="train the predictive or contrastive model")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--objective", choices=["apc", "cpc"])
    p.add_argument("--encoder", choices=["rnn", "transformer"])
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn-hidden", type=int, dest="ffn_hidden")
    p.add_argument("--negatives", type=int)
    p.add_argument("--strategy", choices=[cpc.SAME_UTTERANCE, cpc.OTHER_UTTERANCES])
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="checkpoint + features -> representations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="downstream evaluation")
    p.add_argument("task", choices=["speaker-id", "seq2seq"])
    p.add_argument("--checkpoint")
    p.add_argument("--features", required=True)
    p.add_argument("--eval-features")
    p.add_argument("--holdout", type=float, default=0.2)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--frozen", action="store_true", default=True)
    group.add_argument("--finetune", action="store_true", default=False)
    p.add_argument("--utts-per-speaker", type=int, default=None)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=16)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="table-shaped protocol grids")
    p.add_argument("protocol", choices=["n_sweep", "data_fraction",
                                        "encoder_depth", "utts_per_speaker"])
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--encoder", choices=["rnn", "transformer"], default="rnn")
    p.add_argument("--pretrain-steps", type=int, default=200, dest="pretrain_steps")
    p.add_argument("--probe-steps", type=int, default=200, dest="probe_steps")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
