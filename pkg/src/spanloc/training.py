"""Target assignment, the combined focal+DIoU loss, and the training loop.

Positive timestamps are pyramid positions whose mapped time falls strictly
inside a ground-truth span whose length matches the level's range; their
regression targets are onset/offset distances in embedded-frame units.
The loss sums sigmoid focal loss over all timestamps and DIoU loss over
positive ones, normalized by the positive count.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import AnnotatedClip, CorpusManifest, SpanLabel, load_corpus_clip
from .errors import InvalidConfigError
from .features import FeatureSequence, FrameSpec, append_deltas, cepstral
from .model import DensePrediction, ModelConfig, SpliceModel, level_times
from .optim import AdamWState, adamw_step, lr_at, save_checkpoint


@dataclass
class LevelAssignment:
    positive: np.ndarray   # (T_i,) bool
    one_hot: np.ndarray    # (T_i, C)
    targets: np.ndarray    # (T_i, 2) frame-unit (d_s, d_e); valid where positive


@dataclass
class TargetAssignment:
    levels: list[LevelAssignment]
    t_pos: int


def assign_targets(geometry: list[tuple[int, int, np.ndarray | None]],
                   spans: list[SpanLabel], frame_spec: FrameSpec,
                   level_ranges_s: list[tuple[float, float]],
                   num_categories: int) -> TargetAssignment:
    """Mark pyramid positions inside a span of level-appropriate length.

    ``geometry`` lists (length, stride, validity mask) per level. Targets
    are d_s = t - span_start and d_e = span_end - t in embedded-frame
    units, so d_s + d_e equals the span length in frames at every level.
    """
    ordered = sorted(spans, key=lambda s: s.start_s)
    for a, b in zip(ordered, ordered[1:]):
        if b.start_s < a.end_s:
            raise ValueError("ground-truth spans overlap")
    if len(level_ranges_s) != len(geometry):
        raise ValueError("need one span-length range per level")
    shift_s = frame_spec.frame_shift_ms / 1000.0
    half_window_s = frame_spec.frame_length_ms / 2000.0
    levels = []
    t_pos = 0
    for (length, stride, mask), (lo, hi) in zip(geometry, level_ranges_s):
        positive = np.zeros(length, dtype=bool)
        one_hot = np.zeros((length, num_categories), dtype=np.float64)
        targets = np.zeros((length, 2), dtype=np.float64)
        centers_s = level_times(stride, length) * shift_s + half_window_s
        valid = np.ones(length, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        for span in ordered:
            span_len = span.end_s - span.start_s
            if not lo < span_len <= hi:
                continue
            if span.category >= num_categories:
                raise ValueError(f"span category {span.category} out of range")
            inside = valid & (centers_s > span.start_s) & (centers_s < span.end_s)
            positive |= inside
            one_hot[inside] = 0.0
            one_hot[inside, span.category] = 1.0
            targets[inside, 0] = (centers_s[inside] - span.start_s) / shift_s
            targets[inside, 1] = (span.end_s - centers_s[inside]) / shift_s
        t_pos += int(positive.sum())
        levels.append(LevelAssignment(positive, one_hot, targets))
    return TargetAssignment(levels, t_pos)


def geometry_of(pred: DensePrediction) -> list[tuple[int, int, np.ndarray]]:
    return [(lv.logits.data.shape[0], lv.stride, lv.mask) for lv in pred.levels]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def focal_loss(logits: Tensor, one_hot: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0, valid: np.ndarray | None = None) -> Tensor:
    """Sigmoid focal loss summed over timestamps and classes.

    Computed through softplus so saturated logits stay finite:
    -log p = softplus(-z) and -log(1-p) = softplus(z).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    y = np.asarray(one_hot, dtype=logits.dtype)
    if y.shape != logits.data.shape:
        raise ValueError(f"one_hot shape {y.shape} != logits {logits.data.shape}")
    p = ad.sigmoid(logits)
    pos = ad.mul(ad.power(ad.sub(ad.Tensor(np.asarray(1.0), dtype=logits.dtype), p), gamma),
                 ad.softplus(ad.mul(logits, ad.Tensor(np.asarray(-1.0), dtype=logits.dtype))))
    neg = ad.mul(ad.power(p, gamma), ad.softplus(logits))
    weights_pos = alpha * y
    weights_neg = (1.0 - alpha) * (1.0 - y)
    if valid is not None:
        keep = np.asarray(valid, dtype=logits.dtype)[:, None]
        weights_pos = weights_pos * keep
        weights_neg = weights_neg * keep
    total = ad.add(ad.mul(pos, ad.Tensor(weights_pos, dtype=logits.dtype)),
                   ad.mul(neg, ad.Tensor(weights_neg, dtype=logits.dtype)))
    return ad.tsum(total)


def diou_loss(pred: tuple[float, float], gt: tuple[float, float]) -> float:
    """1 - DIoU for a pair of 1-D intervals; lies in [0, 2]."""
    ps, pe = float(pred[0]), float(pred[1])
    gs, ge = float(gt[0]), float(gt[1])
    if pe <= ps or ge <= gs:
        raise ValueError("degenerate interval")
    inter = max(0.0, min(pe, ge) - max(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    iou = inter / union
    rho2 = ((ps + pe) / 2.0 - (gs + ge) / 2.0) ** 2
    c = max(pe, ge) - min(ps, gs)
    return 1.0 - iou + rho2 / (c * c)


def _tmin(a: Tensor, b: Tensor) -> Tensor:
    return ad.sub(b, ad.relu(ad.sub(b, a)))


def _tmax(a: Tensor, b: Tensor) -> Tensor:
    return ad.add(a, ad.relu(ad.sub(b, a)))


def _diou_terms(pred_se: Tensor, gt_se: np.ndarray) -> Tensor:
    """Differentiable per-row 1 - DIoU for (P, 2) interval stacks.

    Ground-truth intervals are non-degenerate, which keeps the union and
    enclosing length strictly positive even for zero-length predictions.
    """
    dtype = pred_se.dtype
    gt = Tensor(np.asarray(gt_se), dtype=dtype)
    ps, pe = ad.narrow(pred_se, 1, 0, 1), ad.narrow(pred_se, 1, 1, 1)
    gs, ge = ad.narrow(gt, 1, 0, 1), ad.narrow(gt, 1, 1, 1)
    inter = ad.relu(ad.sub(_tmin(pe, ge), _tmax(ps, gs)))
    union = ad.sub(ad.add(ad.sub(pe, ps), ad.sub(ge, gs)), inter)
    iou = ad.div(inter, union)
    half = ad.Tensor(np.asarray(0.5), dtype=dtype)
    centers = ad.sub(ad.mul(ad.add(ps, pe), half), ad.mul(ad.add(gs, ge), half))
    enclosing = ad.sub(_tmax(pe, ge), _tmin(ps, gs))
    penalty = ad.div(ad.mul(centers, centers), ad.mul(enclosing, enclosing))
    one = ad.Tensor(np.asarray(1.0), dtype=dtype)
    return ad.add(ad.sub(one, iou), penalty)


def total_loss(pred: DensePrediction, assignment: TargetAssignment,
               loss_lambda: float = 0.5, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """(lambda * focal + (1 - lambda) * DIoU over positives) / max(T+, 1)."""
    if not 0.0 <= loss_lambda <= 1.0:
        raise ValueError("loss_lambda must lie in [0, 1]")
    if len(pred.levels) != len(assignment.levels):
        raise ValueError("assignment does not match pyramid geometry")
    dtype = pred.levels[0].logits.dtype
    cls_total = None
    loc_total = None
    for lv, asg in zip(pred.levels, assignment.levels):
        if lv.logits.data.shape != asg.one_hot.shape:
            raise ValueError("assignment does not match pyramid geometry")
        term = focal_loss(lv.logits, asg.one_hot, alpha, gamma, valid=lv.mask)
        cls_total = term if cls_total is None else ad.add(cls_total, term)
        pos_idx = np.flatnonzero(asg.positive)
        if pos_idx.size == 0:
            continue
        times = level_times(lv.stride, lv.distances.data.shape[0])[pos_idx]
        dists = ad.gather_rows(lv.distances, pos_idx)
        # pred interval (t - d_s, t + d_e) in embedded-frame units
        t_vec = np.stack([times, times], axis=1).astype(dtype)
        sign = np.array([-1.0, 1.0], dtype=dtype)
        pred_se = ad.add(ad.mul(dists, ad.Tensor(sign, dtype=dtype)),
                         ad.Tensor(t_vec, dtype=dtype))
        gt_se = np.stack([times - asg.targets[pos_idx, 0],
                          times + asg.targets[pos_idx, 1]], axis=1)
        term = ad.tsum(_diou_terms(pred_se, gt_se))
        loc_total = term if loc_total is None else ad.add(loc_total, term)
    lam = ad.Tensor(np.asarray(loss_lambda), dtype=dtype)
    out = ad.mul(cls_total, lam)
    if loc_total is not None:
        one_minus = ad.Tensor(np.asarray(1.0 - loss_lambda), dtype=dtype)
        out = ad.add(out, ad.mul(loc_total, one_minus))
    return ad.mul(out, ad.Tensor(np.asarray(1.0 / max(assignment.t_pos, 1)), dtype=dtype))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    base_lr: float = 1e-3
    weight_decay: float = 1e-3
    warmup_epochs: int = 5
    loss_lambda: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    feature_kind: str = "mel"
    use_deltas: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfigError("epochs", "epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size", "batch_size must be >= 1")
        if self.warmup_epochs >= self.epochs:
            raise InvalidConfigError("warmup_epochs", "warmup_epochs must be < epochs")
        if self.feature_kind not in ("mel", "linear"):
            raise InvalidConfigError("feature_kind", "feature_kind must be 'mel' or 'linear'")
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise InvalidConfigError("loss_lambda", "loss_lambda must lie in [0, 1]")


def extract_features(annotated: AnnotatedClip, frame_spec: FrameSpec,
                     kind: str = "mel", use_deltas: bool = True) -> FeatureSequence:
    seq = cepstral(annotated.clip, frame_spec, kind)
    return append_deltas(seq) if use_deltas else seq


@dataclass
class TrainSample:
    features: np.ndarray
    spans: list[SpanLabel]
    duration_s: float


def _normalization_stats(samples: list[TrainSample], enabled: bool) -> tuple[np.ndarray, np.ndarray]:
    dim = samples[0].features.shape[1]
    if not enabled:
        return np.zeros(dim, dtype=np.float32), np.ones(dim, dtype=np.float32)
    stacked = np.concatenate([s.features for s in samples], axis=0)
    mean = stacked.mean(axis=0)
    scale = 1.0 / np.maximum(stacked.std(axis=0), 1e-6)
    return mean.astype(np.float32), scale.astype(np.float32)


def fit_model(model: SpliceModel, samples: list[TrainSample], frame_spec: FrameSpec,
              config: TrainConfig, feat_mean: np.ndarray, feat_scale: np.ndarray,
              log_hook=None) -> dict:
    """Run the optimization loop; returns the training log dictionary."""
    if not samples:
        raise InvalidConfigError("train_split", "no training clips available")
    params = list(model.parameters().values())
    state = AdamWState(lr=config.base_lr, weight_decay=config.weight_decay)
    order_rng = np.random.default_rng(config.seed)
    steps_per_epoch = max(1, (len(samples) + config.batch_size - 1) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    assignments: dict[int, TargetAssignment] = {}
    epochs_log = []
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(samples))
        epoch_losses = []
        lr_now = state.lr
        for batch_start in range(0, len(order), config.batch_size):
            batch = order[batch_start:batch_start + config.batch_size]
            for p in params:
                p.zero_grad()
            for idx in batch:
                sample = samples[idx]
                feats = (sample.features - feat_mean) * feat_scale
                pred = model.forward(feats)
                if idx not in assignments:
                    assignments[idx] = assign_targets(
                        geometry_of(pred), sample.spans, frame_spec,
                        list(model.config.level_ranges_s), model.config.num_categories)
                loss = total_loss(pred, assignments[idx], config.loss_lambda,
                                  config.focal_alpha, config.focal_gamma)
                loss.backward()
                epoch_losses.append(float(loss.data))
            inv = 1.0 / len(batch)
            grads = [inv * (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for p in params]
            step += 1
            lr_now = lr_at(step, total_steps, warmup_steps, config.base_lr)
            state.lr = lr_now
            adamw_step(params, grads, state)
        entry = {"epoch": epoch + 1, "loss": float(np.mean(epoch_losses)), "lr": lr_now}
        epochs_log.append(entry)
        if log_hook is not None:
            log_hook(entry)
    return {"epochs": epochs_log, "seed": config.seed}


def train(manifest: CorpusManifest, model_config: ModelConfig, train_config: TrainConfig,
          frame_spec: FrameSpec, out_dir=None, log_hook=None,
          config_echo: dict | None = None) -> tuple[SpliceModel, dict, np.ndarray, np.ndarray]:
    """Train on the manifest's train split; optionally persist the run."""
    train_ids = manifest.ids("train")
    if not train_ids:
        raise InvalidConfigError("train_split", "manifest has no training clips")
    samples = []
    for cid in train_ids:
        annotated = load_corpus_clip(manifest, cid)
        seq = extract_features(annotated, frame_spec, train_config.feature_kind,
                               train_config.use_deltas)
        samples.append(TrainSample(seq.values, annotated.spans, annotated.clip.duration_s))
    feat_mean, feat_scale = _normalization_stats(samples, train_config.normalize)
    model_config = _with_input_dim(model_config, samples[0].features.shape[1])
    model = SpliceModel(model_config, seed=train_config.seed)
    log = fit_model(model, samples, frame_spec, train_config, feat_mean, feat_scale, log_hook)
    log["config"] = config_echo if config_echo is not None else {
        "model": asdict(model_config), "train": asdict(train_config),
        "frame_spec": asdict(frame_spec),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        arrays = model.state_arrays()
        arrays["feat_norm.mean"] = feat_mean
        arrays["feat_norm.scale"] = feat_scale
        save_checkpoint(out_dir / "checkpoint.bin", arrays)
        (out_dir / "train_log.json").write_text(json.dumps(log, indent=1) + "\n")
    return model, log, feat_mean, feat_scale


def _with_input_dim(config: ModelConfig, dim: int) -> ModelConfig:
    return config if config.input_dim == dim else replace(config, input_dim=dim)
