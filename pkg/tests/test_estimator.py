"""Estimator-facade tests: sklearn conventions, fit/predict, persistence."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from spanloc.corpus import SpanLabel, SpeechClip
from spanloc.estimator import (CepstralFeatures, SpliceLocalizer,
                               as_span_labels, as_speech_clip)
from spanloc.postprocess import CandidateSpan

SR = 16000


def _wave(duration_s: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(int(duration_s * SR)) / SR
    x = 0.3 * np.sin(2 * np.pi * 220.0 * t) + 0.05 * rng.standard_normal(t.size)
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def _toy_data(n: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    X, y = [], []
    for i in range(n):
        dur = float(rng.uniform(1.0, 1.4))
        X.append(_wave(dur, seed + i))
        if i % 2 == 0:
            start = float(rng.uniform(0.1, 0.4))
            y.append([(start, start + 0.4, int(rng.integers(0, 2)))])
        else:
            y.append([])
    return X, y


def _tiny_localizer(**overrides) -> SpliceLocalizer:
    params = dict(num_categories=2, model_dim=8, num_levels=2, num_heads=2,
                  num_filters=20, num_coeffs=10, epochs=2, warmup_epochs=1,
                  seed=3)
    params.update(overrides)
    return SpliceLocalizer(**params)


class TestCepstralFeatures:
    def test_transform_shapes(self):
        est = CepstralFeatures(num_filters=24, num_coeffs=12)
        out = est.fit_transform([_wave(1.2, 0)])
        assert len(out) == 1
        # 1.2 s at 25 ms frames every 20 ms gives 59 frames; deltas triple width.
        assert out[0].shape == (59, 36)

    def test_deltas_off_keeps_base_width(self):
        est = CepstralFeatures(num_filters=24, num_coeffs=12, deltas=False)
        out = est.transform([_wave(1.0, 1)])
        assert out[0].shape[1] == 12

    def test_accepts_speech_clip_objects(self):
        est = CepstralFeatures(num_filters=24, num_coeffs=12)
        clip = SpeechClip(_wave(1.0, 2), SR)
        a = est.transform([clip])[0]
        b = est.transform([_wave(1.0, 2)])[0]
        np.testing.assert_array_equal(a, b)

    def test_linear_kind_differs_from_mel(self):
        wave = _wave(1.0, 3)
        mel = CepstralFeatures(kind="mel", num_filters=24, num_coeffs=12)
        lin = CepstralFeatures(kind="linear", num_filters=24, num_coeffs=12)
        assert not np.allclose(mel.transform([wave])[0], lin.transform([wave])[0])

    def test_unknown_kind_rejected(self):
        est = CepstralFeatures(kind="bark")
        with pytest.raises(ValueError):
            est.transform([_wave(1.0, 4)])

    def test_clone_roundtrip(self):
        est = CepstralFeatures(kind="linear", num_coeffs=14)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()


class TestSpliceLocalizer:
    def test_get_params_set_params(self):
        est = _tiny_localizer()
        params = est.get_params()
        assert params["model_dim"] == 8
        est.set_params(model_dim=16)
        assert est.get_params()["model_dim"] == 16

    def test_clone_preserves_params(self):
        est = _tiny_localizer(nms_mode="soft", loss_lambda=0.7)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_fit_returns_self_and_sets_state(self):
        X, y = _toy_data()
        est = _tiny_localizer()
        assert est.fit(X, y) is est
        assert est.input_dim_ == 30
        assert len(est.train_log_["epochs"]) == 2
        losses = [e["loss"] for e in est.train_log_["epochs"]]
        assert all(np.isfinite(losses))

    def test_predict_shapes_and_types(self):
        X, y = _toy_data()
        est = _tiny_localizer().fit(X, y)
        preds = est.predict(X)
        assert len(preds) == len(X)
        for cands in preds:
            assert all(isinstance(c, CandidateSpan) for c in cands)

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            _tiny_localizer().predict([_wave(1.0, 0)])

    def test_score_is_unit_interval_float(self):
        X, y = _toy_data()
        est = _tiny_localizer().fit(X, y)
        s = est.score(X, y)
        assert isinstance(s, float)
        assert 0.0 <= s <= 1.0

    def test_fit_rejects_mismatched_lengths(self):
        X, y = _toy_data(4)
        with pytest.raises(ValueError):
            _tiny_localizer().fit(X, y[:3])

    def test_fit_rejects_out_of_range_category(self):
        X, _ = _toy_data(2)
        y = [[(0.1, 0.5, 5)], []]
        with pytest.raises(ValueError):
            _tiny_localizer().fit(X, y)

    def test_fit_is_seed_deterministic(self):
        X, y = _toy_data()
        a = _tiny_localizer().fit(X, y)
        b = _tiny_localizer().fit(X, y)
        assert [e["loss"] for e in a.train_log_["epochs"]] == \
               [e["loss"] for e in b.train_log_["epochs"]]

    def test_save_load_roundtrip(self, tmp_path):
        X, y = _toy_data()
        est = _tiny_localizer(decode_threshold=0.01).fit(X, y)
        est.save(tmp_path / "run")
        loaded = SpliceLocalizer.load(tmp_path / "run")
        assert loaded.get_params() == est.get_params()
        before = est.predict(X)
        after = loaded.predict(X)
        assert [len(c) for c in before] == [len(c) for c in after]
        for cands_a, cands_b in zip(before, after):
            for a, b in zip(cands_a, cands_b):
                assert a.category == b.category
                assert a.start_s == pytest.approx(b.start_s, abs=1e-5)
                assert a.score == pytest.approx(b.score, abs=1e-5)


class TestInputHelpers:
    def test_as_speech_clip_passthrough_and_wrap(self):
        clip = SpeechClip(_wave(1.0, 0), SR)
        assert as_speech_clip(clip) is clip
        wrapped = as_speech_clip(_wave(1.0, 0))
        assert isinstance(wrapped, SpeechClip)
        assert wrapped.sample_rate == SR

    def test_as_speech_clip_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            as_speech_clip(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            as_speech_clip(np.zeros(0))

    def test_as_span_labels_accepts_triples_and_labels(self):
        label = SpanLabel(0.5, 0.9, 1, "tts_a")
        out = as_span_labels([(1.0, 1.3, 0), label], num_categories=2)
        assert [s.start_s for s in out] == [0.5, 1.0]
        assert all(isinstance(s, SpanLabel) for s in out)

    def test_as_span_labels_none_is_bonafide(self):
        assert as_span_labels(None, 3) == []

    def test_as_span_labels_rejects_large_category(self):
        with pytest.raises(ValueError):
            as_span_labels([(0.1, 0.2, 3)], num_categories=3)
