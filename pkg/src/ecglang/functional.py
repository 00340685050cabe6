"""Differentiable primitives built on :mod:`ecglang.tensor`.

The heavier ops (softmax, layer norm, conv1d, cross-entropy) carry fused
analytic backward passes; everything else is composed from tensor methods.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NumericError, Tensor, _unbroadcast, as_tensor

COSINE_EPS = 1e-8
_GELU_C = math.sqrt(2.0 / math.pi)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        x._accum(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (x,), bw)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    _check_finite(x.data, "logsumexp")
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(g * np.exp(x.data - out_k))

    return Tensor._make(out, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    a = x.data
    inner = _GELU_C * (a + 0.044715 * a**3)
    t = np.tanh(inner)
    out = 0.5 * a * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        x._accum(g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner))

    return Tensor._make(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.data
            x._accum(inv * (gh - gh.mean(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return Tensor._make(out, (x, gain, bias), bw)


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization for channel-last sequences ``(B, T, C)``.

    Statistics are taken over time and the channels of each group.
    """
    x = as_tensor(x)
    b, t, c = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, t, groups, c // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(1, 3), keepdims=True) + eps)
    xhat = xc * inv
    out = xhat.reshape(b, t, c) * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accum((g * xhat.reshape(b, t, c)).sum(axis=(0, 1)))
        if bias.requires_grad:
            bias._accum(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gh = (g * gain.data).reshape(b, t, groups, c // groups)
            dx = inv * (gh - gh.mean(axis=(1, 3), keepdims=True)
                        - xhat * (gh * xhat).mean(axis=(1, 3), keepdims=True))
            x._accum(dx.reshape(b, t, c))

    return Tensor._make(out, (x, gain, bias), bw)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad_left: int = 0, pad_right: int = 0) -> Tensor:
    """1-D convolution over channel-last input.

    x: ``(B, T, C_in)``; weight: ``(C_out, C_in, K)``; returns ``(B, T_out, C_out)``
    with ``T_out = (T + pad_left + pad_right - K) // stride + 1``.
    """
    x = as_tensor(x)
    b, t, cin = x.shape
    cout, cin_w, k = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv1d expects {cin_w} input channels, got {cin}")
    xp = np.pad(x.data, ((0, 0), (pad_left, pad_right), (0, 0)))
    tp = xp.shape[1]
    if tp < k:
        raise ValueError(f"input of length {t} too short for kernel {k}")
    t_out = (tp - k) // stride + 1
    # (B, T_out, C_in, K)
    cols = sliding_window_view(xp, k, axis=1)[:, ::stride][:, :t_out]
    cols2 = cols.reshape(b, t_out, cin * k)
    w2 = weight.data.reshape(cout, cin * k)
    out = cols2 @ w2.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if weight.requires_grad:
            gw = g.reshape(-1, cout).T @ cols2.reshape(-1, cin * k)
            weight._accum(gw.reshape(cout, cin, k))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = (g @ w2).reshape(b, t_out, cin, k)
            gxp = np.zeros_like(xp)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                gxp[:, j:j + span:stride] += gcols[..., j]
            x._accum(gxp[:, pad_left:pad_left + t])

    return Tensor._make(out, parents, bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        weight._accum(full)

    return Tensor._make(out, (weight,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None,
                  reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``targets`` under softmax(``logits``).

    ``mask`` (same shape as ``targets``) selects which positions count.
    ``reduction`` is ``"mean"`` over counted positions or ``"sum"``.
    """
    logits = as_tensor(logits)
    _check_finite(logits.data, "cross_entropy")
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    m = np.ones(tflat.shape, dtype=bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    count = int(m.sum())
    if count == 0:
        raise ValueError("cross_entropy: no positions to score")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(tflat)), tflat]
    scale = 1.0 / count if reduction == "mean" else 1.0
    out = np.asarray((nll * m).sum() * scale, dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(tflat)), tflat] -= 1.0
        p *= (m * (scale * g))[:, None]
        logits._accum(p.reshape(logits.shape))

    return Tensor._make(out, (logits,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits, computed stably."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.dtype)
    a = logits.data
    loss = np.maximum(a, 0) - a * y + np.log1p(np.exp(-np.abs(a)))
    n = a.size
    out = np.asarray(loss.mean(), dtype=logits.dtype)

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * a))
        logits._accum(g * (sig - y) / n)

    return Tensor._make(out, (logits,), bw)


def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return (x * x).sum(axis=axis, keepdims=keepdims).sqrt()


def l2_normalize(x: Tensor, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    """Scale rows to unit norm; a row with norm <= eps is an error, never clamped."""
    x = as_tensor(x)
    n = norm(x, axis=axis, keepdims=True)
    if np.any(n.data <= eps):
        raise NumericError("zero-norm vector in cosine similarity")
    return x / n


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    return (l2_normalize(a, axis, eps) * l2_normalize(b, axis, eps)).sum(axis=axis)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention.

    ``mask`` is an additive constant broadcastable to the score shape
    (``-inf`` style entries use a large negative number).  Returns the
    attended values and the attention weights.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.swapaxes(-1, -2)) * scale
    if mask is not None:
        scores = scores + mask.astype(scores.dtype, copy=False)
    w = softmax(scores, axis=-1)
    return w @ v, w


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    """Additive mask blocking attention to later positions."""
    m = np.triu(np.ones((n, n), dtype=bool), k=1)
    return np.where(m, -1e9, 0.0).astype(dtype)
