"""Decoding dense predictions into spans, NMS, and per-clip scoring."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FrameSpec
from .model import DensePrediction, level_times


@dataclass(frozen=True)
class CandidateSpan:
    """Decoded proposal: [start_s, end_s) with category and confidence."""

    start_s: float
    end_s: float
    category: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.start_s < self.end_s:
            raise ValueError(f"need 0 <= start_s < end_s, got [{self.start_s}, {self.end_s}]")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def decode(pred: DensePrediction, frame_spec: FrameSpec, duration_s: float,
           score_threshold: float = 0.1) -> list[CandidateSpan]:
    """Turn per-timestamp outputs into spans above the score threshold.

    Position t with distances (d_s, d_e) decodes to [t - d_s, t + d_e] in
    embedded-frame units, converted to seconds through the frame geometry
    and clamped to the clip; the threshold comparison is strict.
    """
    if not 0.0 <= score_threshold < 1.0:
        raise ValueError("score_threshold must lie in [0, 1)")
    shift_s = frame_spec.frame_shift_ms / 1000.0
    half_window_s = frame_spec.frame_length_ms / 2000.0
    out: list[CandidateSpan] = []
    for lv in pred.levels:
        probs = _sigmoid(np.asarray(lv.logits.data, dtype=np.float64))
        dists = np.asarray(lv.distances.data, dtype=np.float64)
        scores = probs.max(axis=1)
        categories = probs.argmax(axis=1)
        centers_s = level_times(lv.stride, len(scores)) * shift_s + half_window_s
        keep = (scores > score_threshold) & np.asarray(lv.mask, dtype=bool)
        for idx in np.flatnonzero(keep):
            start = max(0.0, centers_s[idx] - dists[idx, 0] * shift_s)
            end = min(duration_s, centers_s[idx] + dists[idx, 1] * shift_s)
            if end <= start:
                continue
            out.append(CandidateSpan(start, end, int(categories[idx]), float(scores[idx])))
    return out


def _t_iou(a: CandidateSpan, b: CandidateSpan) -> float:
    inter = max(0.0, min(a.end_s, b.end_s) - max(a.start_s, b.start_s))
    union = (a.end_s - a.start_s) + (b.end_s - b.start_s) - inter
    return inter / union if union > 0 else 0.0


def _score_order(spans: list[CandidateSpan]) -> list[CandidateSpan]:
    return sorted(spans, key=lambda c: (-c.score, c.start_s, c.category))


def nms(candidates: list[CandidateSpan], mode: str = "hard",
        iou_threshold: float = 0.5, sigma: float = 0.5) -> list[CandidateSpan]:
    """Suppress redundant same-category spans.

    Hard mode drops any candidate overlapping a kept one at or above the
    tIoU threshold. Soft mode decays scores by exp(-tIoU^2 / sigma) and
    drops candidates falling below 1e-3. Categories never interact.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if mode not in ("hard", "soft"):
        raise ValueError(f"unknown NMS mode {mode!r}")
    if mode == "soft" and sigma <= 0:
        raise ValueError("sigma must be positive for soft NMS")
    kept: list[CandidateSpan] = []
    if mode == "hard":
        for cand in _score_order(candidates):
            if all(cand.category != k.category or _t_iou(cand, k) < iou_threshold
                   for k in kept):
                kept.append(cand)
        return kept
    remaining = _score_order(candidates)
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        decayed = []
        for cand in remaining:
            score = cand.score
            if cand.category == best.category:
                score *= math.exp(-_t_iou(cand, best) ** 2 / sigma)
            if score >= 1e-3:
                decayed.append(CandidateSpan(cand.start_s, cand.end_s, cand.category, score))
        remaining = _score_order(decayed)
    return kept


def utterance_score(candidates: list[CandidateSpan]) -> float:
    """Clip-level spoofing score: the strongest surviving span, or 0."""
    return max((c.score for c in candidates), default=0.0)


def segment_scores(candidates: list[CandidateSpan], duration_s: float,
                   grid_s: float = 0.01) -> np.ndarray:
    """Max candidate score per grid segment; 0 where nothing overlaps."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    num_segments = int(math.ceil(duration_s / grid_s))
    scores = np.zeros(num_segments, dtype=np.float64)
    for cand in candidates:
        first = max(0, int(math.floor(cand.start_s / grid_s)))
        last = min(num_segments, int(math.ceil(cand.end_s / grid_s)))
        for k in range(first, last):
            seg_start, seg_end = k * grid_s, (k + 1) * grid_s
            if cand.start_s < seg_end and cand.end_s > seg_start:
                scores[k] = max(scores[k], cand.score)
    return scores


def save_predictions(clip_id: str, candidates: list[CandidateSpan], path) -> None:
    doc = {
        "clip_id": clip_id,
        "spans": [
            {"start_s": round(c.start_s, 6), "end_s": round(c.end_s, 6),
             "category": c.category, "score": round(c.score, 6)}
            for c in _score_order(candidates)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_predictions(path) -> tuple[str, list[CandidateSpan]]:
    doc = json.loads(Path(path).read_text())
    for key in ("clip_id", "spans"):
        if key not in doc:
            raise ValueError(f"prediction file missing key '{key}'")
    spans = [CandidateSpan(float(s["start_s"]), float(s["end_s"]),
                           int(s["category"]), float(s["score"]))
             for s in doc["spans"]]
    return str(doc["clip_id"]), spans
