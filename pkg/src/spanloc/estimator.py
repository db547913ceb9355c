"""Estimator-style facade: fit/transform/predict over in-memory clips.

`CepstralFeatures` is a stateless transformer; `SpliceLocalizer` wraps
corpus-free training and inference so a detector can be fit on lists of
waveforms and span labels like any other estimator.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import CATEGORY_NAMES, SpanLabel, SpeechClip
from .features import FrameSpec, append_deltas, cepstral
from .metrics import average_map
from .model import ModelConfig, SpliceModel
from .optim import load_checkpoint, save_checkpoint
from .postprocess import CandidateSpan, decode, nms
from .training import TrainConfig, TrainSample, fit_model, _normalization_stats


def as_speech_clip(x, sample_rate: int = 16000) -> SpeechClip:
    """Accept a SpeechClip or a 1-D waveform array in [-1, 1]."""
    if isinstance(x, SpeechClip):
        return x
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("each sample must be a nonempty 1-D waveform")
    return SpeechClip(arr, sample_rate)


def as_span_labels(entry, num_categories: int) -> list[SpanLabel]:
    """Accept SpanLabels or (start_s, end_s, category) triples; [] is bonafide."""
    if entry is None:
        return []
    spans = []
    for item in entry:
        if isinstance(item, SpanLabel):
            span = item
        else:
            start, end, category = item
            category = int(category)
            name = CATEGORY_NAMES[category] if category < len(CATEGORY_NAMES) else str(category)
            span = SpanLabel(float(start), float(end), category, name)
        if span.category >= num_categories:
            raise ValueError(f"span category {span.category} >= num_categories")
        spans.append(span)
    return sorted(spans, key=lambda s: s.start_s)


def _check_parallel(x_items, y_items, what: str):
    if y_items is None or len(x_items) != len(y_items):
        raise ValueError(f"X and {what} must be parallel sequences of equal length")


class CepstralFeatures(TransformerMixin, BaseEstimator):
    """Stateless transformer from waveforms to (T, E) cepstral matrices."""

    def __init__(self, kind: str = "mel", frame_length_ms: float = 25.0,
                 frame_shift_ms: float = 20.0, fft_size: int = 2048,
                 num_filters: int = 40, num_coeffs: int = 20,
                 deltas: bool = True, sample_rate: int = 16000):
        self.kind = kind
        self.frame_length_ms = frame_length_ms
        self.frame_shift_ms = frame_shift_ms
        self.fft_size = fft_size
        self.num_filters = num_filters
        self.num_coeffs = num_coeffs
        self.deltas = deltas
        self.sample_rate = sample_rate

    def _frame_spec(self) -> FrameSpec:
        return FrameSpec(self.frame_length_ms, self.frame_shift_ms,
                         self.fft_size, self.num_filters, self.num_coeffs)

    def fit(self, X, y=None):
        self._frame_spec()  # validate parameters; nothing to learn
        return self

    def transform(self, X) -> list[np.ndarray]:
        spec = self._frame_spec()
        out = []
        for x in X:
            clip = as_speech_clip(x, self.sample_rate)
            seq = cepstral(clip, spec, self.kind)
            if self.deltas:
                seq = append_deltas(seq)
            out.append(seq.values)
        return out


class SpliceLocalizer(BaseEstimator):
    """Trainable splice detector over (waveform, span list) pairs."""

    def __init__(self, num_categories: int = 3, model_dim: int = 32,
                 num_levels: int = 4, num_heads: int = 4, mdc_theta: float = 0.7,
                 feature_kind: str = "mel", num_filters: int = 40,
                 num_coeffs: int = 20, deltas: bool = True,
                 epochs: int = 60, batch_size: int = 4, base_lr: float = 1e-3,
                 weight_decay: float = 1e-3, warmup_epochs: int = 5,
                 loss_lambda: float = 0.5, normalize: bool = True, seed: int = 0,
                 decode_threshold: float = 0.1, nms_mode: str = "hard",
                 nms_iou_threshold: float = 0.5, nms_sigma: float = 0.5,
                 sample_rate: int = 16000):
        self.num_categories = num_categories
        self.model_dim = model_dim
        self.num_levels = num_levels
        self.num_heads = num_heads
        self.mdc_theta = mdc_theta
        self.feature_kind = feature_kind
        self.num_filters = num_filters
        self.num_coeffs = num_coeffs
        self.deltas = deltas
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.loss_lambda = loss_lambda
        self.normalize = normalize
        self.seed = seed
        self.decode_threshold = decode_threshold
        self.nms_mode = nms_mode
        self.nms_iou_threshold = nms_iou_threshold
        self.nms_sigma = nms_sigma
        self.sample_rate = sample_rate

    # -- configuration assembly -------------------------------------------

    def _frame_spec(self) -> FrameSpec:
        return FrameSpec(num_filters=self.num_filters, num_coeffs=self.num_coeffs)

    def _train_config(self) -> TrainConfig:
        kind = {"mel": "mel", "mfcc": "mel", "linear": "linear",
                "lfcc": "linear"}.get(self.feature_kind)
        if kind is None:
            raise ValueError(f"unknown feature_kind {self.feature_kind!r}")
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           base_lr=self.base_lr, weight_decay=self.weight_decay,
                           warmup_epochs=self.warmup_epochs,
                           loss_lambda=self.loss_lambda, seed=self.seed,
                           feature_kind=kind, use_deltas=self.deltas,
                           normalize=self.normalize)

    def _model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(input_dim=input_dim, model_dim=self.model_dim,
                           num_levels=self.num_levels, num_heads=self.num_heads,
                           mdc_theta=self.mdc_theta,
                           num_categories=self.num_categories,
                           level_ranges_s=_level_ranges(self.num_levels))

    def _extract(self, X, config: TrainConfig):
        transform = CepstralFeatures(kind=config.feature_kind,
                                     num_filters=self.num_filters,
                                     num_coeffs=self.num_coeffs,
                                     deltas=self.deltas,
                                     sample_rate=self.sample_rate)
        clips = [as_speech_clip(x, self.sample_rate) for x in X]
        return clips, transform.transform(clips)

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y):
        X = list(X)
        _check_parallel(X, y, "y")
        config = self._train_config()
        clips, feats = self._extract(X, config)
        samples = [TrainSample(f, as_span_labels(spans, self.num_categories),
                               clip.duration_s)
                   for f, spans, clip in zip(feats, y, clips)]
        self.feat_mean_, self.feat_scale_ = _normalization_stats(samples,
                                                                 config.normalize)
        self.frame_spec_ = self._frame_spec()
        self.input_dim_ = samples[0].features.shape[1]
        self.model_ = SpliceModel(self._model_config(self.input_dim_),
                                  seed=self.seed)
        self.train_log_ = fit_model(self.model_, samples, self.frame_spec_,
                                    config, self.feat_mean_, self.feat_scale_)
        return self

    def predict(self, X) -> list[list[CandidateSpan]]:
        check_is_fitted(self, "model_")
        config = self._train_config()
        clips, feats = self._extract(X, config)
        out = []
        for f, clip in zip(feats, clips):
            normalized = (f - self.feat_mean_) * self.feat_scale_
            pred = self.model_.forward(normalized)
            cands = decode(pred, self.frame_spec_, clip.duration_s,
                           self.decode_threshold)
            out.append(nms(cands, self.nms_mode, self.nms_iou_threshold,
                           self.nms_sigma))
        return out

    def score(self, X, y) -> float:
        """Average mAP of predictions against the labeled spans."""
        X = list(X)
        _check_parallel(X, y, "y")
        predicted = self.predict(X)
        predictions = {}
        ground_truth = {}
        for i, (cands, spans) in enumerate(zip(predicted, y)):
            clip_id = f"clip_{i:04d}"
            predictions[clip_id] = cands
            ground_truth[clip_id] = as_span_labels(spans, self.num_categories)
        _, avg = average_map(predictions, ground_truth)
        return avg

    # -- persistence ----------------------------------------------------------

    def save(self, out_dir) -> None:
        check_is_fitted(self, "model_")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        arrays = self.model_.state_arrays()
        arrays["feat_norm.mean"] = self.feat_mean_
        arrays["feat_norm.scale"] = self.feat_scale_
        save_checkpoint(out / "checkpoint.bin", arrays)
        doc = {"params": self.get_params(), "input_dim": self.input_dim_}
        (out / "estimator.json").write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, out_dir) -> "SpliceLocalizer":
        out = Path(out_dir)
        doc = json.loads((out / "estimator.json").read_text())
        est = cls(**doc["params"])
        est.input_dim_ = int(doc["input_dim"])
        arrays = load_checkpoint(out / "checkpoint.bin")
        est.feat_mean_ = arrays.pop("feat_norm.mean")
        est.feat_scale_ = arrays.pop("feat_norm.scale")
        est.frame_spec_ = est._frame_spec()
        est.model_ = SpliceModel(est._model_config(est.input_dim_), seed=est.seed)
        est.model_.load_state_arrays(arrays)
        return est


def _level_ranges(num_levels: int) -> tuple[tuple[float, float], ...]:
    """Contiguous span-length ranges: (0, 0.4], doubling, last unbounded."""
    if num_levels == 1:
        return ((0.0, float("inf")),)
    bounds = [0.0]
    upper = 0.4
    for _ in range(num_levels - 1):
        bounds.append(upper)
        upper *= 2.0
    bounds.append(float("inf"))
    return tuple((bounds[i], bounds[i + 1]) for i in range(num_levels))
