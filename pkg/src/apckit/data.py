"""Dataset manifests and PCM WAV ingestion.

WAV parsing is deliberately hand-rolled: the stdlib module cannot read
IEEE-float files and none of the usual helpers distinguish truncation
from a short read, which the pipeline treats as corruption.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .dsp import Waveform


class ManifestError(ValueError):
    pass


class WavError(ValueError):
    pass


class UnsupportedChannelsError(WavError):
    pass


class UnsupportedCodecError(WavError):
    pass


class TruncatedWavError(WavError):
    pass


@dataclass
class ManifestEntry:
    utterance_id: str
    audio: str
    speaker_id: str
    duration: float = 0.0
    transcript: str | None = None


REQUIRED_FIELDS = ("utterance_id", "audio", "speaker_id")


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a JSON-lines manifest, one utterance per line, order preserved."""
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            missing = [k for k in REQUIRED_FIELDS if k not in record]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {missing}")
            uid = record["utterance_id"]
            if uid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate utterance_id {uid!r}")
            seen.add(uid)
            entries.append(ManifestEntry(
                utterance_id=uid, audio=record["audio"], speaker_id=record["speaker_id"],
                duration=float(record.get("duration", 0.0)),
                transcript=record.get("transcript")))
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            record = {k: v for k, v in asdict(e).items() if v is not None}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_wav(path, utterance_id: str = "", speaker_id: str = "") -> Waveform:
    """Read a mono PCM WAV (16-bit int or 32-bit float), scaled to [-1, 1]."""
    with open(path, "rb") as fh:
        riff = fh.read(12)
        if len(riff) < 12 or riff[:4] != b"RIFF" or riff[8:] != b"WAVE":
            raise WavError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        while True:
            header = fh.read(8)
            if len(header) == 0:
                raise TruncatedWavError(f"{path}: no data chunk found")
            if len(header) < 8:
                raise TruncatedWavError(f"{path}: truncated chunk header")
            chunk_id, size = header[:4], struct.unpack("<I", header[4:])[0]
            if chunk_id == b"fmt ":
                body = fh.read(size)
                if len(body) < 16:
                    raise TruncatedWavError(f"{path}: truncated fmt chunk")
                audio_format, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                fmt = (audio_format, channels, rate, bits)
            elif chunk_id == b"data":
                if fmt is None:
                    raise WavError(f"{path}: data chunk before fmt chunk")
                audio_format, channels, rate, bits = fmt
                if channels != 1:
                    raise UnsupportedChannelsError(
                        f"{path}: {channels} channels; only mono is supported")
                body = fh.read(size)
                if len(body) < size:
                    raise TruncatedWavError(
                        f"{path}: data chunk declares {size} bytes, found {len(body)}")
                if audio_format == 1 and bits == 16:
                    samples = np.frombuffer(body, dtype="<i2").astype(np.float64) / 32768.0
                elif audio_format == 3 and bits == 32:
                    samples = np.frombuffer(body, dtype="<f4").astype(np.float64)
                else:
                    raise UnsupportedCodecError(
                        f"{path}: format {audio_format}/{bits}-bit unsupported "
                        f"(need 16-bit PCM or 32-bit float)")
                return Waveform(samples, rate, utterance_id, speaker_id)
            else:
                skipped = fh.read(size + size % 2)
                if len(skipped) < size:
                    raise TruncatedWavError(f"{path}: truncated {chunk_id!r} chunk")


def write_wav(path, samples: np.ndarray, sample_rate: int, fmt: str = "int16") -> None:
    """Write mono WAV; useful for synthesizing test and demo corpora."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if fmt == "int16":
        payload = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif fmt == "float32":
        payload = samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    byte_rate = sample_rate * bits // 8
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(payload)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(struct.pack("<IHHIIHH", 16, audio_format, 1, sample_rate,
                             byte_rate, bits // 8, bits))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)


def load_waveforms(manifest_path) -> list[Waveform]:
    """Read every manifest entry's audio, resolving paths relative to the
    manifest's directory."""
    base = Path(manifest_path).parent
    waves = []
    for e in read_manifest(manifest_path):
        audio = Path(e.audio)
        if not audio.is_absolute():
            audio = base / audio
        waves.append(read_wav(audio, e.utterance_id, e.speaker_id))
    return waves
