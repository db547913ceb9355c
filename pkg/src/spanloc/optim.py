"""AdamW optimizer, warmup+cosine learning-rate schedule, checkpoint IO.

The checkpoint format is a flat binary dictionary of named float32 arrays
(magic ``TESTCKPT``); it stores model parameters plus any auxiliary arrays
the caller includes, such as feature-normalization statistics.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import CorruptFileError, UnsupportedFormatError

CHECKPOINT_MAGIC = b"TESTCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class AdamWState:
    """Moment estimates and hyperparameters for one parameter group."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def _ensure(self, params: Sequence[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise ValueError("optimizer state does not match parameter list")


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None,
               state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``grads`` may be None to use each parameter's accumulated ``.grad``.
    Weight decay multiplies parameters by (1 - lr*wd) independently of the
    gradient-driven update.
    """
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ValueError("params and grads length mismatch")
    for p, g in zip(params, grads):
        if p.data.shape != np.asarray(g).shape:
            raise ValueError(f"grad shape {np.shape(g)} does not match param {p.data.shape}")
    state._ensure(params)
    state.step_count += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.data.dtype)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0.

    ``step`` counts from 0; the ramp reaches base_lr exactly at
    ``warmup_steps`` and the cosine reaches 0 exactly at ``total_steps``.
    """
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be < total_steps")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays; names are sorted for byte determinism."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f4")  # 0-d stays rank 0
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise UnsupportedFormatError("not a checkpoint file (bad magic)")
    if len(blob) < 16:
        raise CorruptFileError("checkpoint header truncated")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedFormatError(f"unsupported checkpoint version {version}")
    offset = 16
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = blob[offset:offset + 4 * size]
            if len(payload) != 4 * size:
                raise CorruptFileError(f"checkpoint payload truncated for '{name}'")
            offset += 4 * size
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    except struct.error as err:
        raise CorruptFileError(f"checkpoint structure damaged: {err}") from None
    if offset != len(blob):
        raise CorruptFileError("checkpoint has trailing bytes")
    return arrays
