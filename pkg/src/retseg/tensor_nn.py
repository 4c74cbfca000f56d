"""Rank-4 tensor primitives with hand-written backward passes, soft Dice loss,
and the Adam update.

Tensors are plain numpy arrays shaped (batch, channels, rows, cols).  The
normal dtype is float32; every primitive also runs unchanged at float64 for
tighter gradient checking.  Each primitive verifies its output is finite and
raises NonFiniteValue otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteValue, OddSpatialDim, ShapeMismatch, SpatialMismatch

Tensor4 = np.ndarray  # (n, c, h, w)
LayerGrads = dict  # parameter name -> gradient tensor

DICE_EPS = 1.0


def _ensure_finite(name: str, *arrays: np.ndarray):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteValue(f"{name} produced non-finite values")


def conv2d(x: Tensor4, weight: np.ndarray, bias: np.ndarray) -> Tensor4:
    """Same-size cross-correlation, stride 1, zero padding k//2.

    weight is (out_c, in_c, k, k) with odd k (3x3 for the blocks, 1x1 for the
    output head); bias is (out_c,).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: x {x.shape} vs weight {weight.shape}")
    k = weight.shape[2]
    if weight.shape[3] != k or k % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel must be odd square, got {weight.shape}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    y = np.einsum("nchwij,ocij->nohw", win, weight, optimize=True)
    y += bias[None, :, None, None]
    _ensure_finite("conv2d", y)
    return y


def conv2d_backward(x: Tensor4, weight: np.ndarray, dy: Tensor4):
    """Gradients of conv2d; returns (dx, dweight, dbias)."""
    k = weight.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.einsum("nchwij,nohw->ocij", win, dy, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    q = k - 1 - p
    dyp = np.pad(dy, ((0, 0), (0, 0), (q, q), (q, q))) if q else dy
    dwin = sliding_window_view(dyp, (k, k), axis=(2, 3))
    wflip = weight[:, :, ::-1, ::-1]
    dx = np.einsum("nohwij,ocij->nchw", dwin, wflip, optimize=True)
    _ensure_finite("conv2d_backward", dx, dw, db)
    return dx, dw, db


def maxpool2(x: Tensor4):
    """2x2 max pooling, stride 2; returns (y, argmax indices).

    Ties break to the first index in row-major window order, so a constant
    window reports index 0.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(dy: Tensor4, idx: np.ndarray) -> Tensor4:
    """Scatter each upstream gradient into the window slot that won the max."""
    n, c, h2, w2 = dy.shape
    dflat = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(dflat, idx[..., None], dy[..., None], axis=-1)
    dx = dflat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, 2 * h2, 2 * w2)


def upconv2(x: Tensor4, weight: np.ndarray, bias: np.ndarray) -> Tensor4:
    """Transposed convolution, kernel 2x2, stride 2, no padding.

    weight is (in_c, out_c, 2, 2); each input pixel stamps its weighted 2x2
    patch into the output, so the result is (n, out_c, 2h, 2w).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"upconv2: x {x.shape} vs weight {weight.shape}")
    if weight.shape[2:] != (2, 2):
        raise ShapeMismatch(f"upconv2: kernel must be 2x2, got {weight.shape}")
    n, _, h, w = x.shape
    co = weight.shape[1]
    t = np.einsum("ncij,coab->noiajb", x, weight, optimize=True)
    y = t.reshape(n, co, 2 * h, 2 * w) + bias[None, :, None, None]
    _ensure_finite("upconv2", y)
    return y


def upconv2_backward(x: Tensor4, weight: np.ndarray, dy: Tensor4):
    """Gradients of upconv2; returns (dx, dweight, dbias)."""
    n, _, h, w = x.shape
    co = weight.shape[1]
    dyw = dy.reshape(n, co, h, 2, w, 2)
    dx = np.einsum("noiajb,coab->ncij", dyw, weight, optimize=True)
    dw = np.einsum("ncij,noiajb->coab", x, dyw, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    _ensure_finite("upconv2_backward", dx, dw, db)
    return dx, dw, db


def relu(x: Tensor4) -> Tensor4:
    return np.maximum(x, 0)


def relu_backward(x: Tensor4, dy: Tensor4) -> Tensor4:
    return np.where(x > 0, dy, 0)


def sigmoid(x: Tensor4) -> Tensor4:
    """Numerically stable logistic: never exponentiates a positive argument."""
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    _ensure_finite("sigmoid", y)
    return y


def sigmoid_backward(y: Tensor4, dy: Tensor4) -> Tensor4:
    return dy * y * (1.0 - y)


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    """Stack b's channels after a's; batch and spatial dims must agree."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise SpatialMismatch(f"concat_channels: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_backward(dy: Tensor4, a_channels: int):
    return dy[:, :a_channels], dy[:, a_channels:]


def soft_dice_loss(probs: Tensor4, target: Tensor4, eps: float = DICE_EPS):
    """Soft Dice loss over the whole batch, with its analytic gradient.

    loss = 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), eps = 1.0.
    Returns (loss, dloss/dprobs).
    """
    if probs.shape != target.shape:
        raise ShapeMismatch(f"soft_dice_loss: {probs.shape} vs {target.shape}")
    p = probs
    t = target
    inter = float(np.sum(p * t, dtype=np.float64))
    denom = float(np.sum(p, dtype=np.float64)) + float(np.sum(t, dtype=np.float64)) + eps
    num = 2.0 * inter + eps
    loss = 1.0 - num / denom
    dprobs = ((num - 2.0 * t * denom) / (denom * denom)).astype(p.dtype)
    _ensure_finite("soft_dice_loss", dprobs)
    return loss, dprobs


@dataclass
class AdamState:
    """Optimizer state for a whole parameter dict."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: LayerGrads, state: AdamState) -> dict:
    """One bias-corrected Adam update over every parameter.

    The moment recurrences run in float64 and are rounded back to the storage
    dtype, so repeated runs are bit-identical.  grads must cover exactly the
    parameter key set.
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ShapeMismatch(f"adam_step: parameter/gradient key mismatch: {sorted(missing)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"adam_step: {name} grad {g.shape} vs param {p.shape}")
        g64 = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m64 = b1 * (m.astype(np.float64) if m is not None else 0.0) + (1.0 - b1) * g64
        v64 = b2 * (v.astype(np.float64) if v is not None else 0.0) + (1.0 - b2) * g64 * g64
        state.m[name] = m64.astype(p.dtype)
        state.v[name] = v64.astype(p.dtype)
        step = state.lr * (m64 / c1) / (np.sqrt(v64 / c2) + state.eps)
        out[name] = (p.astype(np.float64) - step).astype(p.dtype)
        _ensure_finite("adam_step", out[name])
    return out
