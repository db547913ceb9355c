"""Toy spliced-speech corpus with exact ground-truth span labels.

Bonafide clips are harmonic, speech-like signals. Forged clips replace
requested windows with a distorted copy of the underlying segment; each
category id maps to a fixed distortion family, so a detector can learn
per-category signal signatures while the splice timestamps stay exact.

Persistence: 16-bit PCM mono WAV per clip, a JSON label file per clip,
and a corpus-level JSON manifest with train/eval split assignments.
"""

from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, UnsupportedFormatError

DEFAULT_SAMPLE_RATE = 16000

CATEGORY_NAMES = (
    "band_noise",
    "ring_mod",
    "spectral_tilt",
    "bit_crush",
    "comb_echo",
    "hard_clip",
)
MAX_CATEGORIES = len(CATEGORY_NAMES)


@dataclass
class SpeechClip:
    """Mono waveform with amplitudes limited to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.samples.size and float(np.abs(self.samples).max()) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpanLabel:
    """One forged region: [start_s, end_s) with its source category."""

    start_s: float
    end_s: float
    category: int
    category_name: str

    def __post_init__(self):
        if not 0.0 <= self.start_s < self.end_s:
            raise ValueError(f"need 0 <= start_s < end_s, got [{self.start_s}, {self.end_s}]")
        if self.category < 0:
            raise ValueError("category must be nonnegative")


@dataclass
class AnnotatedClip:
    """Waveform plus its ground-truth forged spans (empty means bonafide)."""

    clip_id: str
    clip: SpeechClip
    spans: list[SpanLabel] = field(default_factory=list)

    def __post_init__(self):
        self.spans = sorted(self.spans, key=lambda s: s.start_s)
        duration = self.clip.duration_s
        for s in self.spans:
            if s.end_s > duration + 1e-9:
                raise ValueError(f"span [{s.start_s}, {s.end_s}] exceeds clip duration {duration}")
        for a, b in zip(self.spans, self.spans[1:]):
            if b.start_s < a.end_s - 1e-12:
                raise ValueError(f"spans overlap: [{a.start_s},{a.end_s}] and [{b.start_s},{b.end_s}]")


@dataclass
class CorpusManifest:
    corpus_dir: Path
    clips: list[tuple[str, str]]  # (clip_id, split)
    num_categories: int
    seed: int

    def ids(self, split: str | None = None) -> list[str]:
        return [cid for cid, sp in self.clips if split is None or sp == split]


@dataclass(frozen=True)
class CorpusConfig:
    num_clips: int = 20
    duration_range_s: tuple[float, float] = (2.0, 8.0)
    bonafide_fraction: float = 0.3
    spans_per_clip: tuple[int, int] = (1, 3)
    span_length_range_s: tuple[float, float] = (0.2, 1.0)
    min_gap_s: float = 0.1
    num_categories: int = 3
    seed: int = 0
    crossfade_ms: float = 5.0
    eval_fraction: float = 0.2
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.num_clips < 1:
            raise InvalidConfigError("num_clips", "num_clips must be >= 1")
        if not 1 <= self.num_categories <= MAX_CATEGORIES:
            raise InvalidConfigError("num_categories", f"num_categories must be in [1, {MAX_CATEGORIES}]")
        if not 0.0 <= self.bonafide_fraction <= 1.0:
            raise InvalidConfigError("bonafide_fraction", "bonafide_fraction must be in [0, 1]")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise InvalidConfigError("eval_fraction", "eval_fraction must be in [0, 1)")
        lo, hi = self.duration_range_s
        if not 0.5 <= lo <= hi:
            raise InvalidConfigError("duration_range_s", "durations must satisfy 0.5 <= lo <= hi")
        slo, shi = self.span_length_range_s
        if not 0.0 < slo <= shi:
            raise InvalidConfigError("span_length_range_s", "span lengths must satisfy 0 < lo <= hi")
        klo, khi = self.spans_per_clip
        if not 1 <= klo <= khi:
            raise InvalidConfigError("spans_per_clip", "span counts must satisfy 1 <= lo <= hi")
        if self.min_gap_s < 0 or self.crossfade_ms < 0:
            raise InvalidConfigError("min_gap_s", "min_gap_s and crossfade_ms must be >= 0")
        if self.crossfade_ms / 1000.0 > slo / 2:
            raise InvalidConfigError("crossfade_ms", "crossfade longer than half the shortest span")


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def _slow_curve(rng: np.random.Generator, n: int, sample_rate: int,
                node_spacing_s: float, lo: float, hi: float) -> np.ndarray:
    """Piecewise-linear random curve with values in [lo, hi]."""
    num_nodes = max(2, int(n / sample_rate / node_spacing_s) + 2)
    nodes = rng.uniform(lo, hi, num_nodes)
    positions = np.linspace(0, n - 1, num_nodes)
    return np.interp(np.arange(n), positions, nodes)


def generate_bonafide(duration_s: float, seed: int,
                      sample_rate: int = DEFAULT_SAMPLE_RATE) -> SpeechClip:
    """Harmonic, speech-like signal: drifting f0, 3-6 harmonics, slow envelope."""
    if duration_s < 0.5:
        raise ValueError("duration_s must be >= 0.5")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    f0 = _slow_curve(rng, n, sample_rate, 0.5, 80.0, 300.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    num_harmonics = int(rng.integers(3, 7))
    rolloff = rng.uniform(0.6, 1.4)
    sig = np.zeros(n)
    for h in range(1, num_harmonics + 1):
        sig += (h ** -rolloff) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    envelope = _slow_curve(rng, n, sample_rate, 0.25, 0.3, 1.0)
    sig = sig * envelope + rng.normal(0.0, 0.003, n)
    sig *= 0.7 / max(np.abs(sig).max(), 1e-9)
    return SpeechClip(np.clip(sig, -1.0, 1.0), sample_rate)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if x.size else 0.0


def _band_noise(x, rng, sr):
    spectrum = np.fft.rfft(rng.normal(0.0, 1.0, len(x)))
    freqs = np.fft.rfftfreq(len(x), 1.0 / sr)
    lo = rng.uniform(1800.0, 2200.0)
    spectrum[(freqs < lo) | (freqs > lo + 2500.0)] = 0.0
    noise = np.fft.irfft(spectrum, n=len(x))
    noise *= (0.8 * _rms(x)) / max(_rms(noise), 1e-9)
    return x + noise


def _ring_mod(x, rng, sr):
    carrier_hz = rng.uniform(280.0, 330.0)
    t = np.arange(len(x)) / sr
    carrier = np.sin(2 * np.pi * carrier_hz * t + rng.uniform(0, 2 * np.pi))
    return x * (0.15 + 0.85 * carrier)


def _spectral_tilt(x, rng, sr):
    # strong pre-emphasis flattens the harmonic rolloff
    coeff = rng.uniform(0.93, 0.97)
    return np.concatenate([[x[0]], x[1:] - coeff * x[:-1]])


def _bit_crush(x, rng, sr):
    levels = int(rng.integers(5, 9))
    peak = max(np.abs(x).max(), 1e-9)
    return np.round(x / peak * levels) / levels * peak


def _comb_echo(x, rng, sr):
    delay = int(rng.uniform(0.002, 0.004) * sr)
    y = x.copy()
    y[delay:] += 0.9 * x[:-delay]
    return y


def _hard_clip(x, rng, sr):
    ceiling = 0.35 * max(np.abs(x).max(), 1e-9)
    return np.clip(3.0 * x, -ceiling, ceiling)


_DISTORTIONS = (_band_noise, _ring_mod, _spectral_tilt, _bit_crush, _comb_echo, _hard_clip)


def synthesize_span(category: int, duration_s: float, seed: int,
                    base: SpeechClip, offset_s: float) -> SpeechClip:
    """Distorted copy of base[offset, offset+duration) with a fixed per-category signature."""
    if not 0 <= category < MAX_CATEGORIES:
        raise ValueError(f"unknown category {category}")
    start = int(round(offset_s * base.sample_rate))
    n = int(round(duration_s * base.sample_rate))
    if offset_s < 0 or start + n > len(base.samples):
        raise ValueError("requested window lies outside the base clip")
    rng = np.random.default_rng(seed)
    segment = np.asarray(base.samples[start:start + n], dtype=np.float64)
    distorted = _DISTORTIONS[category](segment, rng, base.sample_rate)
    target = _rms(segment)
    if target > 1e-9:
        distorted = distorted * (target / max(_rms(distorted), 1e-9))
    return SpeechClip(np.clip(distorted, -1.0, 1.0), base.sample_rate)


def splice(base: SpeechClip, requests: list[tuple[float, float, int]],
           crossfade_ms: float = 5.0, seed: int = 0, clip_id: str = "") -> AnnotatedClip:
    """Replace each requested window with synthesized content.

    The replacement is blended with the base over ``crossfade_ms`` at both
    edges, entirely inside the window, so samples outside the requested
    windows stay bit-identical and labels equal the requests exactly.
    """
    sr = base.sample_rate
    ordered = sorted(requests, key=lambda r: r[0])
    for (s0, e0, _), (s1, e1, _) in zip(ordered, ordered[1:]):
        if s1 < e0:
            raise ValueError(f"requests overlap: [{s0},{e0}] and [{s1},{e1}]")
    cf = int(round(crossfade_ms / 1000.0 * sr))
    out = np.asarray(base.samples, dtype=np.float64).copy()
    labels = []
    for idx, (start_s, end_s, category) in enumerate(ordered):
        if start_s < 0 or end_s > base.duration_s + 1e-9 or end_s <= start_s:
            raise ValueError(f"request [{start_s},{end_s}] outside clip bounds")
        a = int(round(start_s * sr))
        b = int(round(end_s * sr))
        if b - a < 2 * cf:
            raise ValueError("requested span shorter than twice the crossfade")
        span_seed = np.random.default_rng([seed, idx]).integers(2 ** 63)
        synth = synthesize_span(category, (b - a) / sr, int(span_seed), base, a / sr)
        window = np.asarray(synth.samples, dtype=np.float64)
        weight = np.ones(b - a)
        if cf > 0:
            ramp = np.arange(1, cf + 1) / (cf + 1.0)  # never exactly 0 or 1
            weight[:cf] = ramp
            weight[-cf:] = ramp[::-1]
        out[a:b] = weight * window + (1.0 - weight) * out[a:b]
        labels.append(SpanLabel(start_s, end_s, category, CATEGORY_NAMES[category]))
    clip = SpeechClip(np.clip(out, -1.0, 1.0), sr)
    # keep untouched samples bit-identical to the base
    mask = np.ones(len(out), dtype=bool)
    for start_s, end_s, _ in ordered:
        mask[int(round(start_s * sr)):int(round(end_s * sr))] = False
    clip.samples[mask] = base.samples[mask]
    return AnnotatedClip(clip_id, clip, labels)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def _place_spans(rng: np.random.Generator, duration_s: float,
                 config: CorpusConfig) -> list[tuple[float, float]]:
    klo, khi = config.spans_per_clip
    slo, shi = config.span_length_range_s
    for _ in range(100):
        k = int(rng.integers(klo, khi + 1))
        lengths = rng.uniform(slo, shi, k)
        starts = np.sort(rng.uniform(0.0, duration_s, k))
        ends = starts + lengths
        if ends[-1] > duration_s:
            continue
        if np.all(starts[1:] - ends[:-1] >= config.min_gap_s):
            return [(round(float(s), 4), round(float(e), 4)) for s, e in zip(starts, ends)]
    raise InvalidConfigError(
        "span_length_range_s",
        f"could not place spans in a {duration_s:.2f}s clip after 100 attempts",
    )


def generate_clip(config: CorpusConfig, clip_index: int, forged: bool) -> AnnotatedClip:
    """One deterministic clip; randomness derives from (seed, clip_index) only."""
    rng = np.random.default_rng([config.seed, clip_index])
    duration = float(rng.uniform(*config.duration_range_s))
    base = generate_bonafide(duration, int(rng.integers(2 ** 63)), config.sample_rate)
    clip_id = f"clip_{clip_index:05d}"
    if not forged:
        return AnnotatedClip(clip_id, base, [])
    windows = _place_spans(rng, base.duration_s, config)
    categories = rng.integers(0, config.num_categories, len(windows))
    requests = [(s, e, int(c)) for (s, e), c in zip(windows, categories)]
    return splice(base, requests, config.crossfade_ms,
                  seed=int(rng.integers(2 ** 63)), clip_id=clip_id)


def generate_corpus(config: CorpusConfig, out_dir) -> CorpusManifest:
    """Write WAV + label JSON per clip and a manifest; byte-deterministic."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = config.num_clips
    num_bonafide = int(math.floor(n * config.bonafide_fraction))
    role_rng = np.random.default_rng([config.seed, n])
    perm = role_rng.permutation(n)
    bonafide_set = set(int(i) for i in perm[:num_bonafide])
    num_eval = int(math.floor(n * config.eval_fraction))
    split_rng = np.random.default_rng([config.seed, n + 1])
    eval_set = set(int(i) for i in split_rng.permutation(n)[:num_eval])

    clips = []
    for i in range(n):
        annotated = generate_clip(config, i, forged=i not in bonafide_set)
        store_clip(annotated, out_dir / f"{annotated.clip_id}.wav",
                   out_dir / f"{annotated.clip_id}.json")
        clips.append((annotated.clip_id, "eval" if i in eval_set else "train"))
    manifest = CorpusManifest(out_dir, clips, config.num_categories, config.seed)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def store_clip(annotated: AnnotatedClip, wav_path, label_path=None) -> None:
    clip = annotated.clip
    quantized = np.clip(np.round(np.asarray(clip.samples, dtype=np.float64) * 32767.0),
                        -32767, 32767).astype("<i2")
    with wave.open(str(wav_path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(quantized.tobytes())
    if label_path is not None:
        doc = {
            "clip_id": annotated.clip_id,
            "duration_s": round(clip.duration_s, 6),
            "sample_rate": clip.sample_rate,
            "spans": [
                {"start_s": s.start_s, "end_s": s.end_s,
                 "category": s.category, "category_name": s.category_name}
                for s in annotated.spans
            ],
        }
        Path(label_path).write_text(json.dumps(doc, indent=1) + "\n")


def load_clip(wav_path, label_path=None) -> AnnotatedClip:
    with wave.open(str(wav_path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise UnsupportedFormatError(f"expected mono WAV, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise UnsupportedFormatError(f"expected 16-bit WAV, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0
    clip = SpeechClip(np.clip(samples, -1.0, 1.0), rate)
    clip_id = Path(wav_path).stem
    spans: list[SpanLabel] = []
    if label_path is not None:
        doc = json.loads(Path(label_path).read_text())
        for key in ("clip_id", "duration_s", "sample_rate", "spans"):
            if key not in doc:
                raise ValueError(f"label file missing key '{key}'")
        clip_id = doc["clip_id"]
        spans = [SpanLabel(float(s["start_s"]), float(s["end_s"]),
                           int(s["category"]), str(s["category_name"]))
                 for s in doc["spans"]]
    return AnnotatedClip(clip_id, clip, spans)


def save_manifest(manifest: CorpusManifest, path) -> None:
    doc = {
        "seed": manifest.seed,
        "num_categories": manifest.num_categories,
        "clips": [{"id": cid, "split": split} for cid, split in manifest.clips],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    for key in ("seed", "num_categories", "clips"):
        if key not in doc:
            raise ValueError(f"manifest missing key '{key}'")
    clips = []
    for entry in doc["clips"]:
        if entry["split"] not in ("train", "eval"):
            raise ValueError(f"unknown split '{entry['split']}' for clip '{entry['id']}'")
        clips.append((str(entry["id"]), str(entry["split"])))
    return CorpusManifest(path.parent, clips, int(doc["num_categories"]), int(doc["seed"]))


def load_corpus_clip(manifest: CorpusManifest, clip_id: str) -> AnnotatedClip:
    return load_clip(manifest.corpus_dir / f"{clip_id}.wav",
                     manifest.corpus_dir / f"{clip_id}.json")
