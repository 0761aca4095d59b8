"""Deterministic synthetic dyadic sessions and the aligned-session file format.

Random streams
--------------
Every session draws from its own PCG64 (XSL-RR 128/64) stream. The 128-bit
state and increment are seeded with SplitMix64::

    z = (z + 0x9E3779B97F4A7C15) mod 2^64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2^64
    out = z ^ (z >> 31)

starting from ``z = seed * 2^32 + index``; four outputs form state (hi, lo) and
increment (hi, lo). Uniforms are ``(raw >> 11) * 2^-53``; normals use the
Box-Muller cosine branch on consecutive uniform pairs ``(u1, u2)`` with
``u1`` replaced by ``1 - u1`` so the log argument is never zero.

File format (little endian)::

    b"DYADSESS"  magic
    u32          format version (1)
    u32          header length n
    n bytes      UTF-8 JSON header (session_id, T, widths, column maps,
                 modality blocks, normalisation stats, sha256 of payload)
    payload      float64 T*412 emitter, T*68 receiver, T*2 labels, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signalprep import (AlignedFeatureMatrix, SessionBundle, default_schema)

MASK64 = (1 << 64) - 1
SESSION_MAGIC = b"DYADSESS"
SESSION_VERSION = 1


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GenConfig:
    seed: int = 7
    num_sessions: int = 8
    timeline_length: int = 2000
    label_step_prob: float = 0.02
    label_step_scale: float = 1.0
    relatedness: float = 0.8
    receiver_lag: int = 0
    noise_std: float = 1.0
    ar_coef: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.label_step_prob <= 1.0:
            raise ValueError("label_step_prob must lie in [0, 1]")
        if self.label_step_scale <= 0:
            raise ValueError("label_step_scale must be positive")
        if not 0.0 <= self.relatedness <= 1.0:
            raise ValueError("relatedness must lie in [0, 1]")
        if self.receiver_lag < 0 or self.noise_std < 0:
            raise ValueError("receiver_lag and noise_std must be non-negative")
        if not 0.0 <= self.ar_coef < 1.0:
            raise ValueError("ar_coef must lie in [0, 1)")


def splitmix64(z: int):
    while True:
        z = (z + 0x9E3779B97F4A7C15) & MASK64
        x = z
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
        yield x ^ (x >> 31)


class Stream:
    """Uniform and normal draws from a SplitMix64-seeded PCG64 stream."""

    def __init__(self, seed: int, index: int):
        sm = splitmix64(((seed & 0xFFFFFFFF) << 32 | (index & 0xFFFFFFFF)) & MASK64)
        s_hi, s_lo, i_hi, i_lo = (next(sm) for _ in range(4))
        self._bg = np.random.PCG64()
        self._bg.state = {
            "bit_generator": "PCG64",
            "state": {"state": (s_hi << 64) | s_lo, "inc": ((i_hi << 64) | i_lo) | 1},
            "has_uint32": 0,
            "uinteger": 0,
        }

    def uniform(self, n: int) -> np.ndarray:
        raw = self._bg.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        u = self.uniform(2 * n)
        u1, u2 = 1.0 - u[0::2], u[1::2]
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)


def _stepwise_walk(stream: Stream, T: int, prob: float, scale: float) -> np.ndarray:
    start = stream.normal((1,))[0]
    jumps = stream.uniform(T - 1) < prob
    sizes = stream.normal((T - 1,)) * scale
    increments = np.concatenate([[start], np.where(jumps, sizes, 0.0)])
    return np.cumsum(increments)


def _ar_noise(stream: Stream, T: int, c: int, coef: float, std: float) -> np.ndarray:
    innov = stream.normal((T, c)) * std * np.sqrt(1.0 - coef * coef)
    out = np.empty((T, c))
    out[0] = stream.normal((c,)) * std
    for t in range(1, T):
        out[t] = coef * out[t - 1] + innov[t]
    return out


def _mixing(seed: int, schema: dict) -> tuple[np.ndarray, np.ndarray]:
    # shared by every session of one seed: the feature semantics stay fixed
    s = Stream(seed, 0xFFFFFFFF)
    ne = sum(len(v) for v in schema["emitter"].values())
    nr = sum(len(v) for v in schema["receiver"].values())
    return s.normal((2, ne)), s.normal((2, nr))


def _matrix(features: np.ndarray, source: str, schema: dict) -> AlignedFeatureMatrix:
    cmap, blocks, off = {}, {}, 0
    for modality, names in schema[source].items():
        for i, name in enumerate(names):
            cmap[name] = off + i
        blocks[modality] = (off, off + len(names))
        off += len(names)
    return AlignedFeatureMatrix(features, cmap, source, blocks)


def generate_session(cfg: GenConfig, index: int) -> SessionBundle:
    """One session. Labels are two stepwise walks (competence, warmth). Emitter
    features mix them at weight ``0.3 * relatedness``; receiver features at
    ``relatedness``, delayed by ``receiver_lag``; both carry AR(1) noise."""
    if not 0 <= index < cfg.num_sessions:
        raise ValueError(f"index {index} outside [0, {cfg.num_sessions})")
    T = cfg.timeline_length
    if T < cfg.receiver_lag + 2:
        raise ValueError(f"timeline_length {T} must be at least receiver_lag + 2")
    schema = default_schema()
    mix_e, mix_r = _mixing(cfg.seed, schema)
    s = Stream(cfg.seed, index)
    labels = np.stack([_stepwise_walk(s, T, cfg.label_step_prob, cfg.label_step_scale)
                       for _ in range(2)], axis=1)
    lagged = np.concatenate([np.repeat(labels[:1], cfg.receiver_lag, axis=0),
                             labels[:T - cfg.receiver_lag]], axis=0)
    noise_e = _ar_noise(s, T, mix_e.shape[1], cfg.ar_coef, cfg.noise_std)
    noise_r = _ar_noise(s, T, mix_r.shape[1], cfg.ar_coef, cfg.noise_std)
    emitter = 0.3 * cfg.relatedness * labels @ mix_e + noise_e
    receiver = cfg.relatedness * lagged @ mix_r + noise_r
    return SessionBundle(
        session_id=f"synth-{cfg.seed}-{index:04d}",
        emitter=_matrix(emitter, "emitter", schema),
        receiver=_matrix(receiver, "receiver", schema),
        labels=labels,
    )


def generate(cfg: GenConfig) -> list[SessionBundle]:
    return [generate_session(cfg, i) for i in range(cfg.num_sessions)]


# ---------------------------------------------------------------- file format

def _payload(bundle: SessionBundle) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in (bundle.emitter.features, bundle.receiver.features, bundle.labels))


def write_session(path, bundle: SessionBundle) -> None:
    payload = _payload(bundle)
    header = {
        "session_id": bundle.session_id,
        "T": bundle.T,
        "emitter_dim": bundle.emitter.features.shape[1],
        "receiver_dim": bundle.receiver.features.shape[1],
        "emitter_columns": bundle.emitter.column_map,
        "receiver_columns": bundle.receiver.column_map,
        "emitter_blocks": {k: list(v) for k, v in bundle.emitter.blocks.items()},
        "receiver_blocks": {k: list(v) for k, v in bundle.receiver.blocks.items()},
        "normalization_stats": bundle.normalization_stats,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(SESSION_MAGIC)
        fh.write(struct.pack("<II", SESSION_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_session(path) -> SessionBundle:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ParseError("file shorter than the fixed preamble", len(raw))
    if raw[:8] != SESSION_MAGIC:
        raise ParseError("bad magic", 0)
    version, n = struct.unpack_from("<II", raw, 8)
    if version != SESSION_VERSION:
        raise ParseError(f"unsupported format version {version}", 8)
    if 16 + n > len(raw):
        raise ParseError(f"header of {n} bytes runs past end of file", len(raw))
    try:
        header = json.loads(raw[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise ParseError(f"malformed header: {exc}", 16 + pos) from None
    off = 16 + n
    T, de, dr = header["T"], header["emitter_dim"], header["receiver_dim"]
    need = 8 * T * (de + dr + 2)
    if len(raw) - off != need:
        raise ParseError(f"payload is {len(raw) - off} bytes, expected {need}", len(raw))
    payload = raw[off:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ParseError("payload checksum mismatch", off)
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    e = flat[: T * de].reshape(T, de)
    r = flat[T * de: T * (de + dr)].reshape(T, dr)
    y = flat[T * (de + dr):].reshape(T, 2)
    blocks = lambda key: {k: tuple(v) for k, v in header[key].items()}
    return SessionBundle(
        session_id=header["session_id"],
        emitter=AlignedFeatureMatrix(e, header["emitter_columns"], "emitter", blocks("emitter_blocks")),
        receiver=AlignedFeatureMatrix(r, header["receiver_columns"], "receiver", blocks("receiver_blocks")),
        labels=y,
        normalization_stats=header["normalization_stats"],
    )


def write_sidecar(path, bundle: SessionBundle) -> None:
    side = {
        "session_id": bundle.session_id,
        "T": bundle.T,
        "column_map": {"emitter": bundle.emitter.column_map, "receiver": bundle.receiver.column_map},
        "blocks": {"emitter": {k: list(v) for k, v in bundle.emitter.blocks.items()},
                   "receiver": {k: list(v) for k, v in bundle.receiver.blocks.items()}},
        "normalization_stats": bundle.normalization_stats,
    }
    Path(path).write_text(json.dumps(side, indent=1))
