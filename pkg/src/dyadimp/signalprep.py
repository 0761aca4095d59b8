"""Resampling of raw modality streams onto the label timeline, feature
concatenation, normalisation and windowing.

Feature schema
--------------
Channel lists per (source, modality) follow the modality matrix below; only
the per-source totals (412 emitter, 68 receiver) are enforced on ingested
data. The default channel names are used by the synthetic generator.

========  =============================  ==================================
modality  emitter                        receiver
========  =============================  ==================================
audio     MFCC, voicing prob., RMS, ZCR  (none)
eye       2D and 3D gaze directions      gaze duration, 2D gaze, 3D eyes
facial    AU presence and intensity      AU presence and intensity
physio    (none)                         BVP, ECG, GSR
========  =============================  ==================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence

import numpy as np
from scipy.signal import firwin

EMITTER_DIM = 412
RECEIVER_DIM = 68
SOURCES = ("emitter", "receiver")
MODALITIES = ("audio", "eye", "facial", "physio")
ALLOWED = {
    "emitter": ("audio", "eye", "facial"),
    "receiver": ("eye", "facial", "physio"),
}
FIR_TAPS = 31


class SchemaError(ValueError):
    pass


class ResampleError(ValueError):
    pass


_AU_PRESENCE = [f"AU{n:02d}_c" for n in (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 28, 45)]
_AU_INTENSITY = [f"AU{n:02d}_r" for n in (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 45)]


def default_schema() -> Dict[str, Dict[str, List[str]]]:
    """Channel names per source and modality, summing to 412 / 68 columns."""
    facial = _AU_PRESENCE + _AU_INTENSITY
    e_eye = ["gaze_angle_x", "gaze_angle_y"] + [f"gaze_{i}_{a}" for i in (0, 1) for a in "xyz"]
    e_audio_extra = ["voice_prob", "rms_energy", "zcr"]
    n_mfcc = EMITTER_DIM - len(facial) - len(e_eye) - len(e_audio_extra)
    e_audio = [f"mfcc_{i:03d}" for i in range(n_mfcc)] + e_audio_extra
    r_physio = ["bvp", "ecg", "gsr"]
    r_eye_base = ["gaze_duration", "gaze_loc_x", "gaze_loc_y"]
    n_eye_pts = (RECEIVER_DIM - len(facial) - len(r_physio) - len(r_eye_base)) // 3
    r_eye = r_eye_base + [f"eye_lmk3d_{i}_{a}" for i in range(n_eye_pts) for a in "xyz"]
    return {
        "emitter": {"audio": e_audio, "eye": e_eye, "facial": [f"e_{c}" for c in facial]},
        "receiver": {"eye": r_eye, "facial": [f"r_{c}" for c in facial], "physio": r_physio},
    }


@dataclass(frozen=True)
class RawStream:
    source: str
    modality: str
    channel_names: tuple[str, ...]
    samples: np.ndarray  # (S, c)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise SchemaError(f"unknown source {self.source!r}")
        if self.modality not in ALLOWED[self.source]:
            raise SchemaError(f"modality {self.modality!r} is not recorded for the {self.source}")
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if s.shape[1] != len(self.channel_names):
            raise SchemaError(f"{self.source}/{self.modality}: {s.shape[1]} columns but "
                              f"{len(self.channel_names)} channel names")

    @property
    def sample_count(self) -> int:
        return self.samples.shape[0]


@dataclass
class AlignedFeatureMatrix:
    features: np.ndarray  # (T, D)
    column_map: Dict[str, int]
    source: str
    blocks: Dict[str, tuple[int, int]] = field(default_factory=dict)  # modality -> [start, stop)

    @property
    def timeline_length(self) -> int:
        return self.features.shape[0]


@dataclass
class SessionBundle:
    session_id: str
    emitter: AlignedFeatureMatrix
    receiver: AlignedFeatureMatrix
    labels: np.ndarray  # (T, 2): competence, warmth
    normalization_stats: dict | None = None

    def __post_init__(self):
        t = self.labels.shape[0]
        if self.emitter.timeline_length != t or self.receiver.timeline_length != t:
            raise SchemaError(f"session {self.session_id}: emitter {self.emitter.timeline_length}, "
                              f"receiver {self.receiver.timeline_length} and labels {t} rows differ")
        if not np.all(np.isfinite(self.labels)):
            raise SchemaError(f"session {self.session_id}: non-finite labels")

    @property
    def T(self) -> int:
        return self.labels.shape[0]


# ---------------------------------------------------------------- resampling

def lowpass_taps(factor: int) -> np.ndarray:
    """31-tap Hamming-window FIR with cutoff 0.8/factor of the input Nyquist."""
    return firwin(FIR_TAPS, 0.8 / factor)


def decimate(stream: RawStream, factor: int) -> RawStream:
    """Anti-alias filter then keep every ``factor``-th sample; ``S // factor`` rows."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"decimate: factor must be a positive integer, got {factor!r}")
    x = stream.samples
    if x.shape[0] < factor:
        raise ResampleError(f"decimate: {x.shape[0]} samples is fewer than factor {factor}")
    taps = lowpass_taps(int(factor))
    pad = FIR_TAPS // 2
    xp = np.pad(x, ((pad, pad), (0, 0)), mode="reflect" if x.shape[0] > 1 else "edge")
    # linear-phase symmetric taps: correlation == convolution
    filtered = np.stack([np.convolve(xp[:, j], taps, mode="valid") for j in range(x.shape[1])], axis=1)
    out = filtered[::factor][: x.shape[0] // factor]
    return replace(stream, samples=out)


def fft_downsample(stream: RawStream, target_len: int) -> RawStream:
    """Resample to exactly ``target_len`` rows by windowed low-band reconstruction.

    Output sample ``j`` covers the input interval ``[j*step, (j+1)*step)`` with
    ``step = S/target_len``; the ``ceil(step) + 1`` samples touching it are
    weighted by their fractional overlap, so the step accumulates exactly in
    float. Each weighted window's spectrum is truncated to bins at or below half
    the output Nyquist and evaluated at the window centre. Windows about one
    output period long keep only the DC bin, i.e. the overlap-weighted mean,
    which also damps isolated outliers.
    """
    x = stream.samples
    s = x.shape[0]
    if target_len < 1 or target_len > s:
        raise ValueError(f"fft_downsample: target_len {target_len} outside [1, {s}]")
    if target_len == s:
        return replace(stream, samples=x.copy())
    step = s / target_len
    width = math.ceil(step) + 1
    lo = np.arange(target_len) * step
    hi = lo + step
    starts = np.minimum(np.floor(lo).astype(np.int64), s - width)
    idx = starts[:, None] + np.arange(width)[None, :]
    overlap = np.clip(np.minimum(idx + 1, hi[:, None]) - np.maximum(idx, lo[:, None]), 0.0, None)
    segments = x[idx] * (overlap * width / step)[:, :, None]  # (target, width, c)
    spectrum = np.fft.rfft(segments, axis=1)
    k = np.arange(spectrum.shape[1])
    keep = k / width <= 0.25 / step  # cycles per input sample vs half the output Nyquist
    weight = np.where(k == 0, 1.0, 2.0)
    if width % 2 == 0:
        weight[-1] = 1.0
    centre = (width - 1) / 2.0
    basis = weight * keep * np.exp(2j * np.pi * k * centre / width)
    out = np.real(np.einsum("tkc,k->tc", spectrum, basis)) / width
    return replace(stream, samples=out)


def resample_to(stream: RawStream, label_count: int) -> RawStream:
    s = stream.sample_count
    if s < label_count:
        raise ResampleError(f"{stream.source}/{stream.modality}: {s} samples < {label_count} labels")
    if s == label_count:
        return stream
    factor = s // label_count
    if s % label_count == 0:
        return decimate(stream, factor)
    if factor > 1:
        stream = decimate(stream, factor)
    return fft_downsample(stream, label_count)


def align_to_labels(streams: Sequence[RawStream], label_count: int) -> AlignedFeatureMatrix:
    if not streams:
        raise ResampleError("align_to_labels: no streams")
    sources = {s.source for s in streams}
    if len(sources) != 1:
        raise SchemaError(f"align_to_labels: mixed sources {sorted(sources)}")
    parts = []
    for st in streams:
        if st.sample_count == 0:
            raise ResampleError(f"{st.source}/{st.modality}: empty stream")
        r = resample_to(st, label_count)
        cmap = {name: i for i, name in enumerate(r.channel_names)}
        parts.append(AlignedFeatureMatrix(r.samples, cmap, r.source, {r.modality: (0, len(cmap))}))
    return concat_features(parts, sources.pop())


def concat_features(matrices: Sequence[AlignedFeatureMatrix], source: str) -> AlignedFeatureMatrix:
    if len(matrices) == 1:
        return matrices[0]
    t = matrices[0].timeline_length
    cmap: Dict[str, int] = {}
    blocks: Dict[str, tuple[int, int]] = {}
    offset = 0
    for m in matrices:
        if m.timeline_length != t:
            raise SchemaError(f"concat_features: timelines {m.timeline_length} and {t} differ")
        if m.source != source:
            raise SchemaError(f"concat_features: expected {source} matrix, got {m.source}")
        for name, j in m.column_map.items():
            if name in cmap:
                raise SchemaError(f"concat_features: duplicate column {name!r}")
            cmap[name] = offset + j
        for mod, (a, b) in m.blocks.items():
            if mod in blocks:
                raise SchemaError(f"concat_features: modality {mod!r} appears twice")
            blocks[mod] = (offset + a, offset + b)
        offset += m.features.shape[1]
    feats = np.concatenate([m.features for m in matrices], axis=1)
    return AlignedFeatureMatrix(feats, cmap, source, blocks)


def check_totals(bundle: SessionBundle) -> None:
    if bundle.emitter.features.shape[1] != EMITTER_DIM:
        raise SchemaError(f"emitter has {bundle.emitter.features.shape[1]} columns, expected {EMITTER_DIM}")
    if bundle.receiver.features.shape[1] != RECEIVER_DIM:
        raise SchemaError(f"receiver has {bundle.receiver.features.shape[1]} columns, expected {RECEIVER_DIM}")


# ---------------------------------------------------------------- normalisation

def column_stats(x: np.ndarray) -> dict:
    return {"mean": x.mean(axis=0).tolist(), "std": x.std(axis=0).tolist()}


def zscore(x: np.ndarray, stats: dict) -> np.ndarray:
    mean = np.asarray(stats["mean"])
    std = np.asarray(stats["std"])
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (x - mean) / safe, 0.0)


def normalize(bundle: SessionBundle, stats: dict | None = None) -> SessionBundle:
    """Per-column z-score of both feature blocks; constant columns become 0.

    ``stats`` (``{"emitter": {...}, "receiver": {...}}``) should come from the
    training data; when omitted they are computed from this bundle.
    """
    if stats is None:
        stats = {"emitter": column_stats(bundle.emitter.features),
                 "receiver": column_stats(bundle.receiver.features)}
    em = replace(bundle.emitter, features=zscore(bundle.emitter.features, stats["emitter"]))
    rc = replace(bundle.receiver, features=zscore(bundle.receiver.features, stats["receiver"]))
    return replace(bundle, emitter=em, receiver=rc, normalization_stats=stats)


# ---------------------------------------------------------------- windowing

def window_count(T: int, width: int, stride: int) -> int:
    return (T - width) // stride + 1


def window_arrays(bundle: SessionBundle, width: int, stride: int):
    """Stacked windows: emitter ``(N, W, 412)``, receiver ``(N, W, 68)``, targets ``(N, 2)``."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if width < 1 or width > bundle.T:
        raise ValueError(f"window width {width} outside [1, {bundle.T}]")
    starts = np.arange(window_count(bundle.T, width, stride)) * stride
    idx = starts[:, None] + np.arange(width)[None, :]
    return (bundle.emitter.features[idx], bundle.receiver.features[idx],
            bundle.labels[idx].mean(axis=1))


def window(bundle: SessionBundle, width: int = 20, stride: int = 10):
    """List of ``(emitter W×412, receiver W×68, target 2-vector)``; target is the
    window's mean label."""
    e, r, y = window_arrays(bundle, width, stride)
    return list(zip(e, r, y))
