"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray and records an implicit computation graph
through parent links and per-node backward closures; ``Tensor.backward``
walks the graph once in reverse topological order. The op set is the
minimum needed by the span detector (matmul, conv1d, an LSTM, attention
building blocks) plus ``grad_check``, a central finite-difference probe
used by the test suite to certify every op.

Storage defaults to float32; gradient checks run in float64 because
finite differences are unreliable at single precision.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(op)


class Tensor:
    """Dense real tensor participating in reverse-mode differentiation.

    ``data`` is always a float32 or float64 ndarray. ``grad`` is filled in
    by ``backward`` for every tensor with ``requires_grad`` reachable from
    the loss; repeated backward calls accumulate, so callers zero grads
    between steps via ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=DEFAULT_DTYPE if dtype is None else dtype)
        if arr.dtype not in (np.float32, np.float64):
            raise ValueError("Tensor dtype must be float32 or float64")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every graph leaf.

        Without ``seed`` the tensor must be scalar. Each node is visited
        exactly once, in reverse topological order.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        _accum(self, np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _from_op(data: np.ndarray, parents: Sequence[Tensor], op: str,
             backward: Callable[[np.ndarray], None] | None) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that numpy broadcasting introduced."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(out, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _from_op(out, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(out, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(out, (a, b), "div", backward)


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for a constant exponent."""
    e = float(exponent)
    with np.errstate(all="ignore"):
        out = np.power(x.data, e)

    def backward(g):
        if e == 0.0:
            _accum(x, np.zeros_like(x.data))
            return
        with np.errstate(all="ignore"):
            local = e * np.power(x.data, e - 1.0)
        _check_finite(local, "power-backward")
        _accum(x, g * local)

    return _from_op(out, (x,), "power", backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        _accum(x, g * (x.data > 0))  # subgradient 0 at the kink

    return _from_op(out, (x,), "relu", backward)


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.empty_like(x.data)
        pos = x.data >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
        ex = np.exp(x.data[~pos])
        out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return _from_op(out, (x,), "sigmoid", backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        _accum(x, g * (1.0 - out * out))

    return _from_op(out, (x,), "tanh", backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.exp(x.data)

    def backward(g):
        _accum(x, g * out)

    return _from_op(out, (x,), "exp", backward)


def log(x: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.log(x.data)

    def backward(g):
        _accum(x, g / x.data)

    return _from_op(out, (x,), "log", backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow; used by the focal loss."""
    out = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))

    def backward(g):
        with np.errstate(all="ignore"):
            s = np.empty_like(x.data)
            pos = x.data >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
            ex = np.exp(x.data[~pos])
            s[~pos] = ex / (1.0 + ex)
        _accum(x, g * s)

    return _from_op(out, (x,), "softplus", backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg, x.data.shape).astype(x.dtype, copy=False))

    return _from_op(out, (x,), "sum", backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), _wrap(1.0 / count, x.dtype))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _from_op(out, (x,), "reshape", backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inverse))

    return _from_op(out, (x,), "transpose", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            if t.requires_grad:
                _accum(t, g[tuple(idx)])
            offset += size

    return _from_op(out, tuple(tensors), "concat", backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > x.data.shape[axis]:
        raise ValueError("narrow out of bounds")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    out = np.ascontiguousarray(x.data[tuple(idx)])

    def backward(g):
        full = np.zeros_like(x.data)
        full[tuple(idx)] = g
        _accum(x, full)

    return _from_op(out, (x,), "narrow", backward)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; duplicated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2:
        raise ValueError("gather_rows expects a 2-D tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ValueError("gather_rows index out of range")
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full)

    return _from_op(out, (x,), "gather_rows", backward)


def mask_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (a constant)."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    out = np.where(m, np.asarray(value, dtype=x.dtype), x.data)

    def backward(g):
        _accum(x, np.where(m, 0, g))

    return _from_op(out, (x,), "mask_fill", backward)


def nearest_upsample_1d(x: Tensor, factor: int) -> Tensor:
    """Repeat every time step ``factor`` times along axis 0 of a (T, C) map."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out = np.repeat(x.data, factor, axis=0)

    def backward(g):
        _accum(x, g.reshape(x.data.shape[0], factor, *x.data.shape[1:]).sum(axis=1))

    return _from_op(out, (x,), "nearest_upsample_1d", backward)


# ---------------------------------------------------------------------------
# normalization / attention building blocks
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _from_op(out, (x,), "softmax", backward)


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    n = x.data.shape[axis]

    def backward(g):
        gsum = g.sum(axis=axis, keepdims=True)
        gdot = (g * xhat).sum(axis=axis, keepdims=True)
        _accum(x, inv * (g - gsum / n - xhat * gdot / n))

    return _from_op(xhat, (x,), "layer_norm", backward)


# ---------------------------------------------------------------------------
# matmul / convolution / recurrence
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects tensors of rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError("matmul batch dims must match exactly")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _from_op(out, (a, b), "matmul", backward)


def _conv1d_geometry(t: int, k: int, stride: int, padding: int, dilation: int) -> int:
    span = dilation * (k - 1) + 1
    t_out = (t + 2 * padding - span) // stride + 1
    if t_out < 1:
        raise ValueError("conv1d input too short for kernel/stride/padding")
    return t_out


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """1-D convolution over a (T, C_in) map with weight (C_out, C_in/groups, K).

    Returns (T_out, C_out); cross-correlation convention (no kernel flip).
    """
    t, c_in = x.data.shape
    c_out, c_in_g, k = w.data.shape
    if c_in % groups or c_out % groups or c_in_g != c_in // groups:
        raise ValueError(f"conv1d channel/group mismatch: x{x.data.shape} w{w.data.shape} groups={groups}")
    t_out = _conv1d_geometry(t, k, stride, padding, dilation)

    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    # col[t, k, c] = xp[t*stride + k*dilation, c]
    rows = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :] * dilation
    col = xp[rows]  # (t_out, k, c_in)

    cg_out = c_out // groups
    outs = []
    w_flats = []
    for gi in range(groups):
        col_g = col[:, :, gi * c_in_g:(gi + 1) * c_in_g].reshape(t_out, k * c_in_g)
        # weight laid out (c_out, k, c_in_g) to match the (k, c) column order
        w_flat = w.data[gi * cg_out:(gi + 1) * cg_out].transpose(0, 2, 1).reshape(cg_out, k * c_in_g)
        outs.append(col_g @ w_flat.T)
        w_flats.append((col_g, w_flat))
    out = np.concatenate(outs, axis=1) if groups > 1 else outs[0]
    if b is not None:
        if b.data.shape != (c_out,):
            raise ValueError("conv1d bias shape mismatch")
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data) if w.requires_grad else None
        for gi in range(groups):
            g_g = g[:, gi * cg_out:(gi + 1) * cg_out]
            col_g, w_flat = w_flats[gi]
            if dw is not None:
                dw_flat = g_g.T @ col_g  # (cg_out, k*c_in_g)
                dw[gi * cg_out:(gi + 1) * cg_out] = dw_flat.reshape(cg_out, k, c_in_g).transpose(0, 2, 1)
            if x.requires_grad:
                dcol = (g_g @ w_flat).reshape(t_out, k, c_in_g)
                for ki in range(k):
                    sl = slice(ki * dilation, ki * dilation + stride * t_out, stride)
                    dxp[sl, gi * c_in_g:(gi + 1) * c_in_g] += dcol[:, ki, :]
        if w.requires_grad:
            _accum(w, dw)
        if x.requires_grad:
            _accum(x, dxp[padding:padding + t] if padding else dxp)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _from_op(out, parents, "conv1d", backward)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor,
              b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate order (input, forget, cell, output).

    Composed from primitive ops, so its backward falls out of the graph.
    Shapes: x (E,) as (1, E) or (B, E); w_ih (4H, E); w_hh (4H, H); b (4H,).
    """
    hidden = w_hh.data.shape[1]
    if w_ih.data.shape[0] != 4 * hidden or b.data.shape != (4 * hidden,):
        raise ValueError("lstm_cell parameter shape mismatch")
    gates = add(add(matmul(x, transpose(w_ih, (1, 0))), matmul(h, transpose(w_hh, (1, 0)))), b)
    i = sigmoid(narrow(gates, 1, 0, hidden))
    f = sigmoid(narrow(gates, 1, hidden, hidden))
    g = tanh(narrow(gates, 1, 2 * hidden, hidden))
    o = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    return h2, c2


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """Unidirectional LSTM over a (T, E) sequence, zero initial state.

    Fused primitive: the whole sequence is one graph node with hand-rolled
    backpropagation through time, which keeps graphs small for long clips.
    Returns the hidden states (T, H).
    """
    t_len, e_in = x.data.shape
    hidden = w_hh.data.shape[1]
    if w_ih.data.shape != (4 * hidden, e_in) or b.data.shape != (4 * hidden,):
        raise ValueError("lstm parameter shape mismatch")

    xg = x.data @ w_ih.data.T + b.data  # (T, 4H), the input half of every gate
    i_s = np.empty((t_len, hidden), dtype=x.dtype)
    f_s = np.empty_like(i_s)
    g_s = np.empty_like(i_s)
    o_s = np.empty_like(i_s)
    c_s = np.empty_like(i_s)
    tc_s = np.empty_like(i_s)
    h_prev = np.empty_like(i_s)  # h_{t-1} per step, h_{-1} = 0
    out = np.empty_like(i_s)

    def _sig(z):
        return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))

    h = np.zeros(hidden, dtype=x.dtype)
    c = np.zeros(hidden, dtype=x.dtype)
    w_hh_t = w_hh.data.T
    for ti in range(t_len):
        h_prev[ti] = h
        gates = xg[ti] + h @ w_hh_t
        i_s[ti] = _sig(gates[:hidden])
        f_s[ti] = _sig(gates[hidden:2 * hidden])
        g_s[ti] = np.tanh(gates[2 * hidden:3 * hidden])
        o_s[ti] = _sig(gates[3 * hidden:])
        c = f_s[ti] * c + i_s[ti] * g_s[ti]
        c_s[ti] = c
        tc_s[ti] = np.tanh(c)
        h = o_s[ti] * tc_s[ti]
        out[ti] = h

    def backward(grad_out):
        dgates = np.empty((t_len, 4 * hidden), dtype=x.dtype)
        dh = np.zeros(hidden, dtype=x.dtype)
        dc = np.zeros(hidden, dtype=x.dtype)
        for ti in range(t_len - 1, -1, -1):
            dh = dh + grad_out[ti]
            do = dh * tc_s[ti]
            dc = dc + dh * o_s[ti] * (1.0 - tc_s[ti] * tc_s[ti])
            c_prev = c_s[ti - 1] if ti > 0 else np.zeros(hidden, dtype=x.dtype)
            di = dc * g_s[ti]
            df = dc * c_prev
            dg = dc * i_s[ti]
            dgates[ti, :hidden] = di * i_s[ti] * (1.0 - i_s[ti])
            dgates[ti, hidden:2 * hidden] = df * f_s[ti] * (1.0 - f_s[ti])
            dgates[ti, 2 * hidden:3 * hidden] = dg * (1.0 - g_s[ti] * g_s[ti])
            dgates[ti, 3 * hidden:] = do * o_s[ti] * (1.0 - o_s[ti])
            dh = dgates[ti] @ w_hh.data
            dc = dc * f_s[ti]
        if x.requires_grad:
            _accum(x, dgates @ w_ih.data)
        if w_ih.requires_grad:
            _accum(w_ih, dgates.T @ x.data)
        if w_hh.requires_grad:
            _accum(w_hh, dgates.T @ h_prev)
        if b.requires_grad:
            _accum(b, dgates.sum(axis=0))

    return _from_op(out, (x, w_ih, w_hh, b), "lstm", backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(op_closure: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar closure with central differences.

    Returns the maximum over all coordinates of |a - f| / max(1, |a|, |f|).
    Inputs should be float64 and sit away from non-differentiable points
    (relu kinks, interval-overlap boundaries).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    for t in inputs:
        t.grad = None
    out = op_closure(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check closure must be scalar-valued")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, an in zip(inputs, analytic):
            if not t.requires_grad:
                continue
            for idx in np.ndindex(t.data.shape):
                orig = t.data[idx]
                t.data[idx] = orig + eps
                f_hi = float(op_closure(*inputs).data)
                t.data[idx] = orig - eps
                f_lo = float(op_closure(*inputs).data)
                t.data[idx] = orig
                fd = (f_hi - f_lo) / (2.0 * eps)
                a = float(an[idx])
                worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    return worst
