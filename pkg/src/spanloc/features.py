"""Frame-level cepstral features (MFCC/LFCC) with delta concatenation.

Waveforms are framed with a Hann window, passed through a triangular
filterbank (mel-spaced or linearly spaced), log-compressed, and reduced by
an orthonormal type-II DCT. First and second order delta features can be
appended. Externally computed feature matrices can be ingested through a
small binary format (SFF1) so the detector is not tied to this extractor.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft

from .corpus import SpeechClip
from .errors import CorruptFileError, UnsupportedFormatError

LOG_FLOOR = 1e-10
SFF1_MAGIC = b"SFF1"
SFF1_VERSION = 1


@dataclass(frozen=True)
class FrameSpec:
    """Framing and filterbank geometry; defaults follow common practice."""

    frame_length_ms: float = 25.0
    frame_shift_ms: float = 20.0
    fft_size: int = 2048
    num_filters: int = 256
    num_coeffs: int = 256

    def __post_init__(self):
        if not 0 < self.frame_shift_ms <= self.frame_length_ms:
            raise ValueError("need 0 < frame_shift_ms <= frame_length_ms")
        if self.num_coeffs > self.num_filters:
            raise ValueError("num_coeffs must be <= num_filters")
        if self.fft_size < 1 or self.num_filters < 1 or self.num_coeffs < 1:
            raise ValueError("fft_size, num_filters, num_coeffs must be positive")

    def frame_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_length_ms * sample_rate / 1000.0))

    def shift_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_shift_ms * sample_rate / 1000.0))


@dataclass
class FeatureSequence:
    """T x E feature matrix plus the geometry needed to map frames to time."""

    values: np.ndarray
    frame_spec: FrameSpec
    duration_s: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError("feature values must be a T x E matrix with E >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def frame_count(duration_ms: float, frame_length_ms: float, frame_shift_ms: float) -> int:
    """Number of frames: floor((D - f_L)/f_S) + 1."""
    if frame_shift_ms <= 0:
        raise ValueError("frame_shift_ms must be positive")
    if duration_ms < frame_length_ms:
        raise ValueError("clip shorter than one frame")
    num = duration_ms - frame_length_ms
    # exact integer path where possible; float floor is fragile at boundaries
    if num == int(num) and frame_shift_ms == int(frame_shift_ms):
        return int(num) // int(frame_shift_ms) + 1
    return math.floor(num / frame_shift_ms) + 1


def frame_center_s(t: int, spec: FrameSpec) -> float:
    """Time of frame t's window center in seconds."""
    return (t * spec.frame_shift_ms + spec.frame_length_ms / 2.0) / 1000.0


def _mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_inv(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def filterbank_matrix(kind: str, spec: FrameSpec, sample_rate: int) -> np.ndarray:
    """Triangular filters evaluated on the rfft bin grid: (num_filters, bins)."""
    nyquist = sample_rate / 2.0
    if kind == "mel":
        points = _mel_inv(np.linspace(_mel(0.0), _mel(nyquist), spec.num_filters + 2))
    elif kind == "linear":
        points = np.linspace(0.0, nyquist, spec.num_filters + 2)
    else:
        raise ValueError(f"unknown filterbank kind: {kind!r}")
    freqs = np.fft.rfftfreq(spec.fft_size, d=1.0 / sample_rate)
    lo, mid, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs[None, :] - lo) / np.maximum(mid - lo, 1e-12)
    falling = (hi - freqs[None, :]) / np.maximum(hi - mid, 1e-12)
    return np.maximum(0.0, np.minimum(rising, falling)).astype(np.float64)


def filter_center_freqs(kind: str, spec: FrameSpec, sample_rate: int) -> np.ndarray:
    """Peak frequency of each triangular filter, in Hz."""
    nyquist = sample_rate / 2.0
    if kind == "mel":
        points = _mel_inv(np.linspace(_mel(0.0), _mel(nyquist), spec.num_filters + 2))
    elif kind == "linear":
        points = np.linspace(0.0, nyquist, spec.num_filters + 2)
    else:
        raise ValueError(f"unknown filterbank kind: {kind!r}")
    return points[1:-1]


def _frames(clip: SpeechClip, spec: FrameSpec) -> np.ndarray:
    sr = clip.sample_rate
    length = spec.frame_samples(sr)
    shift = spec.shift_samples(sr)
    if spec.fft_size < length:
        raise ValueError("fft_size smaller than the frame in samples")
    duration_ms = len(clip.samples) * 1000.0 / sr
    t = frame_count(duration_ms, spec.frame_length_ms, spec.frame_shift_ms)
    # guard against sample-domain rounding disagreeing with the ms formula
    while t > 1 and (t - 1) * shift + length > len(clip.samples):
        t -= 1
    idx = np.arange(t)[:, None] * shift + np.arange(length)[None, :]
    return np.asarray(clip.samples, dtype=np.float64)[idx]


def filterbank_energies(clip: SpeechClip, spec: FrameSpec, kind: str = "mel") -> np.ndarray:
    """Per-frame log filterbank energies (T, num_filters), before the DCT."""
    frames = _frames(clip, spec) * np.hanning(spec.frame_samples(clip.sample_rate))
    magnitude = np.abs(np.fft.rfft(frames, n=spec.fft_size, axis=1))
    fbank = filterbank_matrix(kind, spec, clip.sample_rate)
    return np.log(np.maximum(magnitude @ fbank.T, LOG_FLOOR))


def cepstral(clip: SpeechClip, spec: FrameSpec | None = None, kind: str = "mel") -> FeatureSequence:
    """MFCC (kind="mel") or LFCC (kind="linear") features, T x num_coeffs."""
    spec = spec or FrameSpec()
    log_energies = filterbank_energies(clip, spec, kind)
    coeffs = scipy.fft.dct(log_energies, type=2, norm="ortho", axis=1)[:, :spec.num_coeffs]
    duration_s = len(clip.samples) / clip.sample_rate
    return FeatureSequence(coeffs.astype(np.float32), spec, duration_s)


def append_deltas(features: FeatureSequence) -> FeatureSequence:
    """Concatenate first and second order deltas along the feature axis.

    Regression window of radius 2 with edge replication; output is T x 3E.
    """
    x = np.asarray(features.values, dtype=np.float64)
    if x.shape[0] < 3:
        raise ValueError("need at least 3 frames for delta features")
    d1 = _delta(x)
    d2 = _delta(d1)
    out = np.concatenate([x, d1, d2], axis=1).astype(np.float32)
    return FeatureSequence(out, features.frame_spec, features.duration_s)


def _delta(x: np.ndarray, radius: int = 2) -> np.ndarray:
    padded = np.pad(x, ((radius, radius), (0, 0)), mode="edge")
    num = np.zeros_like(x)
    for n in range(1, radius + 1):
        num += n * (padded[radius + n:len(x) + radius + n] - padded[radius - n:len(x) + radius - n])
    return num / (2.0 * sum(n * n for n in range(1, radius + 1)))


def store_features(features: FeatureSequence, path) -> None:
    values = np.asarray(features.values, dtype="<f4")
    t, e = values.shape
    with open(path, "wb") as fh:
        fh.write(SFF1_MAGIC)
        fh.write(struct.pack("<IIIff", SFF1_VERSION, t, e,
                             features.frame_spec.frame_shift_ms,
                             features.frame_spec.frame_length_ms))
        fh.write(values.tobytes())


def load_external_features(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SFF1_MAGIC:
        raise UnsupportedFormatError("not an SFF1 feature file (bad magic)")
    if len(blob) < 24:
        raise CorruptFileError("SFF1 header truncated")
    version, t, e, shift_ms, length_ms = struct.unpack_from("<IIIff", blob, 4)
    if version != SFF1_VERSION:
        raise UnsupportedFormatError(f"unsupported SFF1 version {version}")
    payload = blob[24:]
    if len(payload) != 4 * t * e:
        raise CorruptFileError(f"SFF1 declares {t}x{e} floats but payload holds {len(payload) // 4}")
    values = np.frombuffer(payload, dtype="<f4").reshape(t, e).copy()
    spec = FrameSpec(frame_length_ms=length_ms, frame_shift_ms=shift_ms)
    duration_s = ((t - 1) * shift_ms + length_ms) / 1000.0
    return FeatureSequence(values, spec, duration_s)
