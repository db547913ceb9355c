"""Experiment configuration: presets, JSON loading, strict key checking.

A config file is a JSON object whose sections mirror the dataclasses
below. Every field has a default, so `{}` is a valid config; unknown
sections or keys are rejected with the offending dotted key name.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .corpus import CorpusConfig
from .errors import InvalidConfigError
from .features import FrameSpec
from .metrics import DEFAULT_TIOU_THRESHOLDS
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class PostprocessConfig:
    decode_threshold: float = 0.1
    nms_mode: str = "hard"
    nms_iou_threshold: float = 0.5
    nms_sigma: float = 0.5

    def __post_init__(self):
        if self.nms_mode not in ("hard", "soft"):
            raise InvalidConfigError("postprocess.nms_mode",
                                     "nms_mode must be 'hard' or 'soft'")
        if not 0.0 <= self.decode_threshold < 1.0:
            raise InvalidConfigError("postprocess.decode_threshold",
                                     "decode_threshold must lie in [0, 1)")
        if not 0.0 < self.nms_iou_threshold < 1.0:
            raise InvalidConfigError("postprocess.nms_iou_threshold",
                                     "nms_iou_threshold must lie in (0, 1)")
        if self.nms_sigma <= 0.0:
            raise InvalidConfigError("postprocess.nms_sigma",
                                     "nms_sigma must be positive")


@dataclass(frozen=True)
class MetricsConfig:
    tiou_thresholds: tuple[float, ...] = DEFAULT_TIOU_THRESHOLDS
    f1_threshold: float = 0.5
    grid_s: float = 0.01

    def __post_init__(self):
        if not self.tiou_thresholds:
            raise InvalidConfigError("metrics.tiou_thresholds",
                                     "need at least one tIoU threshold")
        if any(not 0.0 < t <= 1.0 for t in self.tiou_thresholds):
            raise InvalidConfigError("metrics.tiou_thresholds",
                                     "thresholds must lie in (0, 1]")
        if not 0.0 <= self.f1_threshold <= 1.0:
            raise InvalidConfigError("metrics.f1_threshold",
                                     "f1_threshold must lie in [0, 1]")
        if self.grid_s <= 0.0:
            raise InvalidConfigError("metrics.grid_s", "grid_s must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig
    features: FrameSpec
    model: ModelConfig
    train: TrainConfig
    postprocess: PostprocessConfig
    metrics: MetricsConfig
    preset: str = "desk"


_SECTIONS = ("corpus", "features", "model", "train", "postprocess", "metrics")

# side by side: "desk" runs in minutes on a laptop; "paper" mirrors the
# published feature geometry (25/20 ms frames, 2048 FFT, 256 filters,
# first+second deltas -> 768 dims) and the published optimizer settings
PRESETS = {
    "desk": dict(
        features=FrameSpec(num_filters=40, num_coeffs=20),
        model=ModelConfig(input_dim=60, model_dim=32),
    ),
    "paper": dict(
        features=FrameSpec(),
        model=ModelConfig(input_dim=768, model_dim=64),
    ),
}


def default_config(preset: str = "desk") -> ExperimentConfig:
    if preset not in PRESETS:
        raise InvalidConfigError("preset", f"unknown preset {preset!r}")
    chosen = PRESETS[preset]
    return ExperimentConfig(
        corpus=CorpusConfig(),
        features=chosen["features"],
        model=chosen["model"],
        train=TrainConfig(),
        postprocess=PostprocessConfig(),
        metrics=MetricsConfig(),
        preset=preset,
    )


def _coerce(value, dotted: str):
    if isinstance(value, list):
        return tuple(_coerce(v, dotted) for v in value)
    if value is None and dotted.startswith("model.level_ranges_s"):
        return float("inf")  # JSON has no inf; null marks an open range
    return value


def _merge_section(instance, section: str, overrides: dict):
    if not isinstance(overrides, dict):
        raise InvalidConfigError(section, f"section '{section}' must be an object")
    known = {f.name for f in fields(instance)}
    updates = {}
    for key, value in overrides.items():
        if key not in known:
            raise InvalidConfigError(f"{section}.{key}",
                                     f"unknown config key '{section}.{key}'")
        updates[key] = _coerce(value, f"{section}.{key}")
    if not updates:
        return instance
    try:
        return replace(instance, **updates)
    except InvalidConfigError as exc:
        # dataclass validators name bare fields; qualify with the section
        key = exc.key if "." in exc.key else f"{section}.{exc.key}"
        raise InvalidConfigError(key, str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(section, str(exc)) from exc


def parse_config(doc: dict, seed: int | None = None) -> ExperimentConfig:
    """Build a config from a parsed JSON object; reject unknown keys."""
    if not isinstance(doc, dict):
        raise InvalidConfigError("config", "top level must be a JSON object")
    preset = doc.get("preset", "desk")
    if not isinstance(preset, str):
        raise InvalidConfigError("preset", "preset must be a string")
    cfg = default_config(preset)
    doc_seed = None
    for key, value in doc.items():
        if key == "preset":
            continue
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise InvalidConfigError("seed", "seed must be an integer")
            doc_seed = value
        elif key in _SECTIONS:
            cfg = replace(cfg, **{key: _merge_section(getattr(cfg, key), key, value)})
        else:
            raise InvalidConfigError(key, f"unknown config key '{key}'")
    if seed is not None:
        doc_seed = seed
    if doc_seed is not None:
        cfg = with_seed(cfg, doc_seed)
    return cfg


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    """Read a JSON config file; a missing path means all defaults."""
    if path is None:
        return parse_config({}, seed)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfigError("config", f"config is not valid JSON: {exc}") from exc
    return parse_config(doc, seed)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, corpus=replace(cfg.corpus, seed=seed),
                   train=replace(cfg.train, seed=seed))


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return None
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Resolved-config echo; strictly JSON-serializable (inf becomes null)."""
    out: dict = {"preset": cfg.preset}
    for section in _SECTIONS:
        instance = getattr(cfg, section)
        out[section] = {f.name: _jsonable(getattr(instance, f.name))
                        for f in fields(instance)}
    return out
