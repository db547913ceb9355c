"""Anchor-free temporal span detector over frame-level features.

Architecture: a masked difference convolution projects features into the
model width; a stack of recurrent-transformer blocks (LSTM, then
self-attention, then a feed-forward sublayer, each pre-normalized and
residual) alternates with stride-2 convolutions to build a bottom-up
pyramid; a top-down pass fuses coarse maps back into fine ones; two small
convolutional heads, shared across levels, emit per-timestamp category
logits and nonnegative onset/offset distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_LEVEL_RANGES = ((0.0, 0.4), (0.4, 0.8), (0.8, 1.6), (1.6, float("inf")))


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 60
    model_dim: int = 32
    num_levels: int = 4
    num_heads: int = 4
    ffn_expansion: int = 4
    mdc_kernel: int = 3
    mdc_theta: float = 0.7
    num_categories: int = 3
    level_ranges_s: tuple[tuple[float, float], ...] = DEFAULT_LEVEL_RANGES

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if not 0.0 <= self.mdc_theta <= 1.0:
            raise ValueError("mdc_theta must lie in [0, 1]")
        if self.mdc_kernel % 2 == 0:
            raise ValueError("mdc_kernel must be odd")
        if len(self.level_ranges_s) != self.num_levels:
            raise ValueError("need one span-length range per pyramid level")
        for (lo, hi), (lo2, _) in zip(self.level_ranges_s, self.level_ranges_s[1:]):
            if hi != lo2:
                raise ValueError("level ranges must be contiguous")


@dataclass
class LevelPrediction:
    """Dense per-timestamp outputs at one pyramid level."""

    logits: Tensor      # (T_i, C)
    distances: Tensor   # (T_i, 2), nonnegative, embedded-frame units
    mask: np.ndarray    # (T_i,) bool validity
    stride: int


@dataclass
class DensePrediction:
    levels: list[LevelPrediction] = field(default_factory=list)

    @property
    def num_proposals(self) -> int:
        return sum(lv.logits.data.shape[0] for lv in self.levels)


def map_timestamp(stride: int, tau: int) -> int:
    """Embedded frame index of pyramid position tau at the given stride."""
    return stride // 2 + tau * stride


def level_times(stride: int, length: int) -> np.ndarray:
    return stride // 2 + np.arange(length) * stride


def mdc_project(x: Tensor, mask: np.ndarray, weights: Tensor, theta: float) -> Tensor:
    """Difference convolution: conv(x) - theta * x(t) * sum_k w(k), masked.

    Masked positions are treated as zero input and produce zero rows.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    kernel = weights.data.shape[2]
    if kernel % 2 == 0:
        raise ValueError("kernel must be odd-sized for same padding")
    invalid = ~np.asarray(mask, dtype=bool)
    xm = ad.mask_fill(x, invalid[:, None], 0.0)
    conv = ad.conv1d(xm, weights, padding=kernel // 2)
    w_sum = ad.tsum(weights, axis=2)  # (out, in)
    diff = ad.matmul(xm, ad.transpose(w_sum, (1, 0)))
    out = ad.sub(conv, ad.mul(diff, ad.Tensor(np.asarray(theta), dtype=x.dtype)))
    return ad.mask_fill(out, invalid[:, None], 0.0)


def _attention(x: Tensor, mask: np.ndarray, p: dict[str, Tensor], prefix: str,
               num_heads: int) -> Tensor:
    t_len, dim = x.data.shape
    head_dim = dim // num_heads
    def split(name):
        proj = ad.matmul(x, p[f"{prefix}.{name}"])
        return ad.transpose(ad.reshape(proj, (t_len, num_heads, head_dim)), (1, 0, 2))
    q, k, v = split("wq"), split("wk"), split("wv")
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
    scores = ad.mul(scores, ad.Tensor(np.asarray(1.0 / math.sqrt(head_dim)), dtype=x.dtype))
    key_invalid = ~np.asarray(mask, dtype=bool)
    scores = ad.mask_fill(scores, key_invalid[None, None, :], -1e9)
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (t_len, dim))
    return ad.matmul(mixed, p[f"{prefix}.wo"])


def rtransformer_block(x: Tensor, mask: np.ndarray, p: dict[str, Tensor],
                       prefix: str, num_heads: int) -> Tensor:
    """LSTM, self-attention, feed-forward; each pre-normalized and residual."""
    if x.data.ndim != 2:
        raise ValueError("block input must be a T x model_dim map")
    h = ad.add(x, ad.lstm(ad.layer_norm(x), p[f"{prefix}.lstm.w_ih"],
                          p[f"{prefix}.lstm.w_hh"], p[f"{prefix}.lstm.b"]))
    h = ad.add(h, _attention(ad.layer_norm(h), mask, p, f"{prefix}.attn", num_heads))
    f = ad.layer_norm(h)
    ffn = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(f, p[f"{prefix}.ffn.w1"]),
                                          p[f"{prefix}.ffn.b1"])),
                           p[f"{prefix}.ffn.w2"]), p[f"{prefix}.ffn.b2"])
    out = ad.add(h, ffn)
    return ad.mask_fill(out, ~np.asarray(mask, dtype=bool)[:, None], 0.0)


def _downsample_mask(mask: np.ndarray) -> np.ndarray:
    t_out = (len(mask) + 1) // 2
    padded = np.zeros(2 * t_out, dtype=bool)
    padded[:len(mask)] = mask
    return padded.reshape(t_out, 2).any(axis=1)


def build_pyramid(projected: Tensor, mask: np.ndarray, p: dict[str, Tensor],
                  config: ModelConfig) -> list[tuple[Tensor, np.ndarray, int]]:
    """Bottom-up block/downsample alternation, then top-down fusion.

    Returns per level (fused map, validity mask, cumulative stride).
    """
    t_len = projected.data.shape[0]
    if t_len < 1:
        raise ValueError("cannot build a pyramid from an empty sequence")
    mask = np.asarray(mask, dtype=bool)
    bottom_up: list[tuple[Tensor, np.ndarray]] = []
    current, cur_mask = projected, mask
    for level in range(config.num_levels):
        if level > 0:
            current = ad.conv1d(current, p[f"down.{level - 1}.w"],
                                p[f"down.{level - 1}.b"], stride=2, padding=1)
            cur_mask = _downsample_mask(cur_mask)
            current = ad.mask_fill(current, ~cur_mask[:, None], 0.0)
        current = rtransformer_block(current, cur_mask, p, f"blocks.{level}",
                                     config.num_heads)
        bottom_up.append((current, cur_mask))

    levels: list[tuple[Tensor, np.ndarray, int]] = [None] * config.num_levels
    top = config.num_levels - 1
    td = bottom_up[top][0]
    levels[top] = (td, bottom_up[top][1], 2 ** top)
    for level in range(top - 1, -1, -1):
        bu, lv_mask = bottom_up[level]
        t_i = bu.data.shape[0]
        upsampled = ad.narrow(ad.nearest_upsample_1d(td, 2), 0, 0, t_i)
        lateral = ad.matmul(bu, p[f"lateral.{level}.w"])
        td = ad.mask_fill(ad.add(lateral, upsampled), ~lv_mask[:, None], 0.0)
        levels[level] = (td, lv_mask, 2 ** level)
    return levels


def _head(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = x
    for layer in range(2):
        h = ad.conv1d(h, p[f"{prefix}.{layer}.w"], p[f"{prefix}.{layer}.b"], padding=1)
        h = ad.relu(ad.layer_norm(h))
    return ad.conv1d(h, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"], padding=1)


def predict_heads(levels: list[tuple[Tensor, np.ndarray, int]],
                  p: dict[str, Tensor]) -> DensePrediction:
    """Shared classification and localization heads over every level."""
    out = DensePrediction()
    for feat, mask, stride in levels:
        logits = _head(feat, p, "head.cls")
        distances = ad.relu(_head(feat, p, "head.loc"))
        out.levels.append(LevelPrediction(logits, distances, mask, stride))
    return out


class SpliceModel:
    """Parameter container plus the forward pass; one clip at a time."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params = _init_params(config, np.random.default_rng(seed), dtype)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def forward(self, values: np.ndarray, mask: np.ndarray | None = None) -> DensePrediction:
        values = np.asarray(values, dtype=self.dtype)
        if values.ndim != 2 or values.shape[1] != self.config.input_dim:
            raise ValueError(f"expected (T, {self.config.input_dim}) features, got {values.shape}")
        if mask is None:
            mask = np.ones(values.shape[0], dtype=bool)
        x = Tensor(values, dtype=self.dtype)
        projected = mdc_project(x, mask, self.params["proj.w"], self.config.mdc_theta)
        levels = build_pyramid(projected, mask, self.params, self.config)
        return predict_heads(levels, self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: np.asarray(t.data, dtype=np.float32) for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:4]}")
        for name, tensor in self.params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != tensor.data.shape:
                raise ValueError(f"parameter '{name}' shape {arr.shape} != {tensor.data.shape}")
            tensor.data = arr.copy()
            tensor.grad = None


def _init_params(config: ModelConfig, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    d, e = config.model_dim, config.input_dim
    hidden = d * config.ffn_expansion

    def param(shape, std=None, fill=None):
        if fill is not None:
            data = np.full(shape, fill)
        elif std is None:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, std, shape)
        return Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)

    p: dict[str, Tensor] = {}
    p["proj.w"] = param((d, e, config.mdc_kernel), std=math.sqrt(2.0 / (e * config.mdc_kernel)))
    for i in range(config.num_levels):
        bound = 1.0 / math.sqrt(d)
        for name, shape in (("w_ih", (4 * d, d)), ("w_hh", (4 * d, d))):
            p[f"blocks.{i}.lstm.{name}"] = Tensor(
                rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True, dtype=dtype)
        p[f"blocks.{i}.lstm.b"] = param((4 * d,))
        for name in ("wq", "wk", "wv", "wo"):
            p[f"blocks.{i}.attn.{name}"] = param((d, d), std=math.sqrt(1.0 / d))
        p[f"blocks.{i}.ffn.w1"] = param((d, hidden), std=math.sqrt(2.0 / d))
        p[f"blocks.{i}.ffn.b1"] = param((hidden,))
        p[f"blocks.{i}.ffn.w2"] = param((hidden, d), std=math.sqrt(2.0 / hidden))
        p[f"blocks.{i}.ffn.b2"] = param((d,))
    for i in range(config.num_levels - 1):
        p[f"down.{i}.w"] = param((d, d, 3), std=math.sqrt(2.0 / (d * 3)))
        p[f"down.{i}.b"] = param((d,))
        p[f"lateral.{i}.w"] = param((d, d), std=math.sqrt(1.0 / d))
    for head in ("cls", "loc"):
        for layer in range(2):
            p[f"head.{head}.{layer}.w"] = param((d, d, 3), std=math.sqrt(2.0 / (d * 3)))
            p[f"head.{head}.{layer}.b"] = param((d,))
    c = config.num_categories
    p["head.cls.out.w"] = param((c, d, 3), std=1e-2)
    # rare-positive prior keeps early sigmoid outputs near 1%
    p["head.cls.out.b"] = param((c,), fill=-math.log((1.0 - 0.01) / 0.01))
    p["head.loc.out.w"] = param((2, d, 3), std=1e-2)
    # positive offset keeps the final relu away from its dead zone
    p["head.loc.out.b"] = param((2,), fill=2.0)
    return p
