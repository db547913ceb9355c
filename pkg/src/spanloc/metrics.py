"""Evaluation: tIoU, average mAP, utterance EER, segment EER and F1.

Matching for mAP is greedy per category: predictions in descending score
order claim the unmatched same-clip ground-truth span of highest tIoU at
or above the threshold. EER sweeps score thresholds (decide spoofed when
score >= threshold) and linearly interpolates the FAR/FRR crossing.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import SpanLabel
from .postprocess import CandidateSpan

DEFAULT_TIOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def t_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two intervals; 0 when disjoint."""
    a0, a1 = float(a[0]), float(a[1])
    b0, b1 = float(b[0]), float(b[1])
    if a1 <= a0 or b1 <= b0:
        raise ValueError("degenerate interval")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    return inter / ((a1 - a0) + (b1 - b0) - inter)


def _ap_from_flags(flags: list[bool], num_gt: int) -> float:
    """Area under the interpolated precision envelope."""
    if num_gt == 0:
        return 0.0
    if not flags:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum([not f for f in flags])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: running max from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for r, p, flag in zip(recall, envelope, flags):
        if flag:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


def average_map(predictions: dict[str, list[CandidateSpan]],
                ground_truth: dict[str, list[SpanLabel]],
                thresholds: tuple[float, ...] = DEFAULT_TIOU_THRESHOLDS,
                ) -> tuple[dict[float, float], float]:
    """Per-threshold mAP over categories with ground truth, plus the mean."""
    gt_categories = sorted({s.category for spans in ground_truth.values() for s in spans})
    pred_categories = {c.category for cands in predictions.values() for c in cands}
    stray = pred_categories - set(gt_categories)
    if stray:
        warnings.warn(f"predictions contain categories without ground truth: {sorted(stray)}")
    per_threshold: dict[float, float] = {}
    for threshold in thresholds:
        aps = []
        for category in gt_categories:
            rows = []
            for clip_id, cands in predictions.items():
                for c in cands:
                    if c.category == category:
                        rows.append((c, clip_id))
            rows.sort(key=lambda rc: (-rc[0].score, rc[0].start_s, rc[0].category, rc[1]))
            gt_spans = {cid: [s for s in spans if s.category == category]
                        for cid, spans in ground_truth.items()}
            num_gt = sum(len(v) for v in gt_spans.values())
            matched: dict[str, set[int]] = {cid: set() for cid in ground_truth}
            flags = []
            for cand, clip_id in rows:
                spans = gt_spans.get(clip_id, [])
                best_iou, best_idx = 0.0, -1
                for idx, span in enumerate(spans):
                    if idx in matched.get(clip_id, set()):
                        continue
                    iou = t_iou((cand.start_s, cand.end_s), (span.start_s, span.end_s))
                    if iou >= threshold and iou > best_iou:
                        best_iou, best_idx = iou, idx
                if best_idx >= 0:
                    matched[clip_id].add(best_idx)
                    flags.append(True)
                else:
                    flags.append(False)
            aps.append(_ap_from_flags(flags, num_gt))
        per_threshold[threshold] = float(np.mean(aps)) if aps else 0.0
    avg = float(np.mean(list(per_threshold.values()))) if per_threshold else 0.0
    return per_threshold, avg


def eer(scores, labels) -> float:
    """Equal error rate; labels True for spoofed (positive) items.

    Decisions call spoofed when score >= threshold. FAR is the bonafide
    false-alarm rate and FRR the spoofed miss rate; the crossing is found
    over all distinct thresholds with linear interpolation between.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be parallel 1-D sequences")
    num_pos = int(labels.sum())
    num_neg = int((~labels).sum())
    if num_pos == 0 or num_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    thresholds = np.concatenate([np.unique(scores), [np.inf]])
    far = np.array([(scores[~labels] >= th).mean() for th in thresholds])
    frr = np.array([(scores[labels] < th).mean() for th in thresholds])
    diff = far - frr  # starts >= 0, ends <= 0
    for k in range(len(thresholds) - 1):
        if diff[k] == 0.0:
            return float(far[k])
        if diff[k] > 0.0 and diff[k + 1] <= 0.0:
            denominator = (frr[k + 1] - frr[k]) - (far[k + 1] - far[k])
            if denominator == 0.0:
                return float((far[k] + frr[k]) / 2.0)
            alpha = (far[k] - frr[k]) / denominator
            return float(far[k] + alpha * (far[k + 1] - far[k]))
    return float(far[-1])


def rasterize_spans(spans: list[SpanLabel], num_segments: int,
                    grid_s: float = 0.01) -> np.ndarray:
    """Segment-level ground truth: positive iff the midpoint is in a span."""
    mids = (np.arange(num_segments) + 0.5) * grid_s
    labels = np.zeros(num_segments, dtype=bool)
    for span in spans:
        labels |= (span.start_s <= mids) & (mids < span.end_s)
    return labels


def segment_metrics(scores_per_clip: list[np.ndarray],
                    spans_per_clip: list[list[SpanLabel]],
                    grid_s: float = 0.01,
                    f1_threshold: float = 0.5) -> tuple[float, float]:
    """Pooled segment EER and F1 at the binarization threshold."""
    if len(scores_per_clip) != len(spans_per_clip):
        raise ValueError("scores and spans lists must be parallel")
    if not scores_per_clip:
        raise ValueError("no segments to evaluate")
    all_scores = []
    all_labels = []
    for scores, spans in zip(scores_per_clip, spans_per_clip):
        scores = np.asarray(scores, dtype=np.float64)
        all_scores.append(scores)
        all_labels.append(rasterize_spans(spans, len(scores), grid_s))
    pooled_scores = np.concatenate(all_scores)
    pooled_labels = np.concatenate(all_labels)
    if pooled_scores.size == 0:
        raise ValueError("no segments to evaluate")
    seg_eer = eer(pooled_scores, pooled_labels)
    predicted = pooled_scores >= f1_threshold
    tp = int(np.sum(predicted & pooled_labels))
    fp = int(np.sum(predicted & ~pooled_labels))
    fn = int(np.sum(~predicted & pooled_labels))
    if tp == 0:
        return seg_eer, 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return seg_eer, float(2.0 * precision * recall / (precision + recall))


@dataclass
class EvalReport:
    map_per_tiou: dict[float, float]
    avg_map: float
    utt_eer: float
    seg_eer: float
    seg_f1: float
    counts: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "map_per_tiou": {f"{k:.2f}": v for k, v in sorted(self.map_per_tiou.items())},
            "avg_map": self.avg_map,
            "utt_eer": self.utt_eer,
            "seg_eer": self.seg_eer,
            "seg_f1": self.seg_f1,
            "counts": self.counts,
        }


def evaluate(predictions: dict[str, list[CandidateSpan]],
             ground_truth: dict[str, list[SpanLabel]],
             durations: dict[str, float],
             thresholds: tuple[float, ...] = DEFAULT_TIOU_THRESHOLDS,
             grid_s: float = 0.01,
             f1_threshold: float = 0.5) -> EvalReport:
    """Assemble the full report over one set of clips."""
    missing = set(predictions) - set(ground_truth)
    if missing:
        raise ValueError(f"predictions for unknown clips: {sorted(missing)[:4]}")
    from .postprocess import segment_scores, utterance_score

    per_tiou, avg = average_map(predictions, ground_truth, thresholds)
    utt_scores = []
    utt_labels = []
    seg_scores = []
    seg_spans = []
    for clip_id, gt in ground_truth.items():
        cands = predictions.get(clip_id, [])
        utt_scores.append(utterance_score(cands))
        utt_labels.append(bool(gt))
        num_segments = int(math.ceil(durations[clip_id] / grid_s))
        seg_scores.append(segment_scores(cands, durations[clip_id], grid_s)
                          if num_segments else np.zeros(0))
        seg_spans.append(gt)
    utt = eer(utt_scores, utt_labels)
    seg_eer, seg_f1 = segment_metrics(seg_scores, seg_spans, grid_s, f1_threshold)
    counts = {
        "clips": len(ground_truth),
        "gt_spans": sum(len(v) for v in ground_truth.values()),
        "predictions": sum(len(v) for v in predictions.values()),
    }
    return EvalReport(per_tiou, avg, utt, seg_eer, seg_f1, counts)


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json_dict(), indent=1) + "\n")
