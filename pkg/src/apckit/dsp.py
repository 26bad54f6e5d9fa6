"""Waveform to log-Mel feature pipeline with per-speaker normalization.

Conventions are fixed so golden tests stay bit-exact: 25 ms Hann window,
10 ms hop, power spectrum, natural log with an additive 1e-10 floor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray            # 1-D float in [-1, 1]
    sample_rate: int
    utterance_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class SpectrogramConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None      # defaults to sample_rate / 2

    def window_length(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def validate(self, sample_rate: int) -> None:
        win = self.window_length(sample_rate)
        if self.fft_size < win:
            raise ConfigError(f"fft_size {self.fft_size} smaller than window of {win} samples")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        fmax = self.fmax if self.fmax is not None else sample_rate / 2.0
        if not self.fmin < fmax:
            raise ConfigError(f"fmin {self.fmin} must be below fmax {fmax}")


@dataclass
class FeatureSequence:
    """One utterance as an N x d matrix of feature frames."""

    frames: np.ndarray
    utterance_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames))
        if self.frames.shape[0] < 1:
            raise ValueError("feature sequence needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"non-finite values in features of {self.utterance_id!r}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def stft(wave: Waveform, cfg: SpectrogramConfig) -> np.ndarray:
    """Complex spectrogram [T x (fft_size/2 + 1)], Hann window, hop stride.

    T = 1 + floor((len - win) / hop); frames are zero-padded to fft_size.
    """
    cfg.validate(wave.sample_rate)
    win = cfg.window_length(wave.sample_rate)
    hop = cfg.hop_length(wave.sample_rate)
    x = wave.samples
    if len(x) < win:
        raise ValueError(
            f"waveform of {len(x)} samples is shorter than one {win}-sample window")
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win)[None, :]
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def mel_filterbank(cfg: SpectrogramConfig, sample_rate: int = 16000) -> np.ndarray:
    """Triangular mel filters [n_mels x (fft_size/2 + 1)], each row peaking at 1.

    Centers are spaced evenly on the mel scale between fmin and fmax.
    """
    cfg.validate(sample_rate)
    fmax = cfg.fmax if cfg.fmax is not None else sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / cfg.fft_size

    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
        peak = fb[m].max()
        if peak <= 0.0:
            # centers quantize onto duplicate FFT bins and the triangle
            # covers none: n_mels too large for this fft resolution
            raise ConfigError(
                f"mel filter {m} covers no FFT bin at fft_size {cfg.fft_size}; "
                f"reduce n_mels or raise fft_size")
        fb[m] /= peak
    return fb


def log_mel(wave: Waveform, cfg: SpectrogramConfig) -> FeatureSequence:
    """Log mel spectrogram: log(filterbank . |stft|^2 + floor), N x n_mels."""
    spec = stft(wave, cfg)
    power = np.abs(spec) ** 2
    fb = mel_filterbank(cfg, wave.sample_rate)
    feats = np.log(power @ fb.T + LOG_FLOOR).astype(np.float32)
    return FeatureSequence(feats, wave.utterance_id, wave.speaker_id)


def compute_speaker_stats(features: Iterable[FeatureSequence]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-speaker, per-coefficient mean and std over all frames."""
    groups: dict[str, list[np.ndarray]] = {}
    for f in features:
        groups.setdefault(f.speaker_id, []).append(np.asarray(f.frames, dtype=np.float64))
    if not groups:
        raise ValueError("no utterances to compute speaker statistics from")
    stats = {}
    for spk, mats in groups.items():
        stacked = np.concatenate(mats, axis=0)
        stats[spk] = (stacked.mean(axis=0), stacked.std(axis=0))
    return stats


def apply_speaker_stats(features: Sequence[FeatureSequence],
                        stats: dict[str, tuple[np.ndarray, np.ndarray]]) -> list[FeatureSequence]:
    """Normalize each utterance with its speaker's statistics.

    Zero-variance coefficients map to 0 rather than dividing by zero.
    """
    out = []
    for f in features:
        if f.speaker_id not in stats:
            raise ValueError(f"no normalization statistics for speaker {f.speaker_id!r}")
        mean, std = stats[f.speaker_id]
        safe = np.where(std > 0.0, std, 1.0)
        normed = np.where(std > 0.0, (f.frames - mean) / safe, 0.0)
        out.append(FeatureSequence(normed.astype(f.frames.dtype), f.utterance_id, f.speaker_id))
    return out


def speaker_cmvn(features: Sequence[FeatureSequence]) -> list[FeatureSequence]:
    """Zero mean / unit variance per speaker, statistics from this very set."""
    if not features:
        raise ValueError("speaker_cmvn needs at least one utterance")
    return apply_speaker_stats(features, compute_speaker_stats(features))
