"""Versioned binary container for named float tensors, used for feature
caches and checkpoints.

Layout (all integers little-endian):

    magic   4 bytes   b"APCT"
    version u8        currently 1
    meta    u64 length + UTF-8 JSON blob (config, speaker maps, ...)
    count   u64       number of entries
    entries           per entry:
                        u16 name length, UTF-8 name
                        u8  dtype code (0 = float32, 1 = float64)
                        u8  ndim
                        u64 x ndim dims
                        u64 byte offset into the payload
    payload           row-major little-endian tensor data

Offsets must be non-overlapping and in bounds; readers reject unknown
magic or versions before touching the payload.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .dsp import FeatureSequence

MAGIC = b"APCT"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ContainerError(ValueError):
    """Base class for container format problems."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class CorruptContainerError(ContainerError):
    pass


class ConfigMismatchError(ValueError):
    """Checkpoint config does not match what the caller expects."""


@dataclass
class _Entry:
    name: str
    dtype: np.dtype
    shape: tuple[int, ...]
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * self.dtype.itemsize if self.shape \
            else self.dtype.itemsize


def container_write(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors plus a JSON metadata blob."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ContainerError("duplicate tensor names")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")

    header = io.BytesIO()
    header.write(MAGIC)
    header.write(struct.pack("<B", VERSION))
    header.write(struct.pack("<Q", len(meta_bytes)))
    header.write(meta_bytes)
    header.write(struct.pack("<Q", len(names)))

    offset = 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _CODE_FOR:
            raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        encoded = name.encode("utf-8")
        header.write(struct.pack("<H", len(encoded)))
        header.write(encoded)
        header.write(struct.pack("<BB", _CODE_FOR[np.dtype(arr.dtype.name)], arr.ndim))
        for dim in arr.shape:
            header.write(struct.pack("<Q", dim))
        header.write(struct.pack("<Q", offset))
        payloads.append(arr.tobytes())
        offset += len(payloads[-1])

    with open(path, "wb") as fh:
        fh.write(header.getvalue())
        for chunk in payloads:
            fh.write(chunk)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CorruptContainerError(f"truncated container while reading {what}")
    return data


def _read_header(fh) -> tuple[dict, list[_Entry], int]:
    """Parse and validate everything before the payload.

    Returns (meta, entries, payload_start).
    """
    magic = fh.read(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = _read_exact(fh, 1, "version")[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} not supported (expect {VERSION})")
    (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
    try:
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptContainerError(f"metadata is not valid JSON: {exc}") from exc
    (count,) = struct.unpack("<Q", _read_exact(fh, 8, "entry count"))

    entries = []
    seen = set()
    for i in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2, f"entry {i} name length"))
        name = _read_exact(fh, name_len, f"entry {i} name").decode("utf-8")
        if name in seen:
            raise CorruptContainerError(f"duplicate tensor name {name!r}")
        seen.add(name)
        code, ndim = struct.unpack("<BB", _read_exact(fh, 2, f"entry {name!r} dtype/ndim"))
        if code not in _DTYPE_CODES:
            raise CorruptContainerError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, f"entry {name!r} dims"))
        (offset,) = struct.unpack("<Q", _read_exact(fh, 8, f"entry {name!r} offset"))
        entries.append(_Entry(name, _DTYPE_CODES[code], tuple(int(d) for d in dims), offset))

    payload_start = fh.tell()
    spans = sorted((e.offset, e.offset + e.nbytes, e.name) for e in entries)
    for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise CorruptContainerError(f"entries {n1!r} and {n2!r} overlap")
    return meta, entries, payload_start


def container_read(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read every tensor; bit-exact inverse of :func:`container_write`."""
    with open(path, "rb") as fh:
        meta, entries, payload_start = _read_header(fh)
        out = {}
        for e in entries:
            fh.seek(payload_start + e.offset)
            raw = _read_exact(fh, e.nbytes, f"payload of {e.name!r}")
            out[e.name] = np.frombuffer(raw, dtype=e.dtype).reshape(e.shape).copy()
    return meta, out


def container_read_entry(fh, name: str) -> np.ndarray:
    """Random-access read of one tensor from an open binary file object;
    touches only the header and that entry's byte range."""
    fh.seek(0)
    meta, entries, payload_start = _read_header(fh)
    for e in entries:
        if e.name == name:
            fh.seek(payload_start + e.offset)
            raw = _read_exact(fh, e.nbytes, f"payload of {name!r}")
            return np.frombuffer(raw, dtype=e.dtype).reshape(e.shape).copy()
    raise KeyError(f"no tensor named {name!r} in container")


def container_meta(path) -> dict:
    with open(path, "rb") as fh:
        meta, _, _ = _read_header(fh)
    return meta


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    opt_tensors: dict[str, np.ndarray]
    step: int
    epoch: int


def checkpoint_save(path, config: dict, params: dict[str, np.ndarray],
                    opt_tensors: dict[str, np.ndarray] | None = None,
                    step: int = 0, epoch: int = 0) -> None:
    meta = {"kind": "checkpoint", "config": config, "config_hash": config_hash(config),
            "step": step, "epoch": epoch}
    tensors = {f"param.{k}": v for k, v in params.items()}
    for k, v in (opt_tensors or {}).items():
        tensors[k] = v
    container_write(path, tensors, meta)


def checkpoint_load(path, expected_config: dict | None = None) -> Checkpoint:
    meta, tensors = container_read(path)
    if meta.get("kind") != "checkpoint":
        raise CorruptContainerError(f"{path} is not a checkpoint container")
    config = meta["config"]
    if config_hash(config) != meta.get("config_hash"):
        raise ConfigMismatchError("stored config does not match its recorded hash")
    if expected_config is not None and expected_config != config:
        diff = {k for k in set(expected_config) | set(config)
                if expected_config.get(k) != config.get(k)}
        raise ConfigMismatchError(f"checkpoint config differs on fields {sorted(diff)}")
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    opt = {k: v for k, v in tensors.items() if k.startswith("adam.")}
    return Checkpoint(config, params, opt, meta.get("step", 0), meta.get("epoch", 0))


# ---------------------------------------------------------------------------
# Feature caches
# ---------------------------------------------------------------------------

def write_feature_cache(path, features, config: dict | None = None,
                        transcripts: dict[str, str] | None = None) -> None:
    """One entry per utterance, keyed by utterance id; speakers (and any
    transcripts) ride in the metadata."""
    tensors, speakers, order = {}, {}, []
    for f in features:
        if f.utterance_id in tensors:
            raise ContainerError(f"duplicate utterance id {f.utterance_id!r}")
        tensors[f.utterance_id] = np.asarray(f.frames, dtype=np.float32)
        speakers[f.utterance_id] = f.speaker_id
        order.append(f.utterance_id)
    meta = {"kind": "features", "speakers": speakers, "order": order,
            "config": config or {}, "transcripts": transcripts or {}}
    container_write(path, tensors, meta)


def read_feature_cache(path) -> list[FeatureSequence]:
    meta, tensors = container_read(path)
    if meta.get("kind") != "features":
        raise CorruptContainerError(f"{path} is not a feature cache")
    speakers = meta["speakers"]
    return [FeatureSequence(tensors[uid], uid, speakers.get(uid, ""))
            for uid in meta["order"]]
