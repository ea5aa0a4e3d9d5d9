"""Fused differentiable operations used by the encoder and the loss stack."""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, _unbroadcast, as_tensor, make_result

logger = logging.getLogger(__name__)

KL_EPS = 1e-12
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} is invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (broadcastable boolean, True = keep) forces excluded entries to
    probability exactly 0. Every slice along ``axis`` must keep at least one entry.
    """
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI

    def backward(g):
        return (g * (cdf + x.data * pdf),)

    return make_result(x.data * cdf, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return make_result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return make_result(xhat * gain.data + bias.data, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, one_hot) -> Tensor:
    """Per-row ``-sum(one_hot * log_softmax(logits))`` over the last axis.

    A zero ``one_hot`` row gives exactly 0 for that row. Reduces to a 0-d tensor
    for 1-d inputs.
    """
    logits = as_tensor(logits)
    target = one_hot.data if isinstance(one_hot, Tensor) else np.asarray(one_hot, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ShapeError(f"cross_entropy shape mismatch {logits.shape} vs {target.shape}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    out = 0.0 - (target * logp).sum(axis=-1)

    def backward(g):
        mass = target.sum(axis=-1, keepdims=True)
        return (g[..., None] * (np.exp(logp) * mass - target),)

    return make_result(out, (logits,), backward)


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1, eps: float = KL_EPS) -> Tensor:
    """Row-wise KL(p || q) along ``axis``.

    Terms with p == 0 contribute 0. ``q`` is clamped below at ``eps`` so the
    result stays finite when q underflows.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shape mismatch {p.shape} vs {q.shape}")
    axis = _check_axis(p, axis)
    pos = p.data > 0
    qc = np.maximum(q.data, eps)
    logp = np.log(np.where(pos, p.data, 1.0))
    logq = np.log(qc)
    out = np.where(pos, p.data * (logp - logq), 0.0).sum(axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        gp = np.where(pos, logp - logq + 1.0, 0.0) * g if p.requires_grad else None
        gq = -(p.data / qc) * (q.data > eps) * g if q.requires_grad else None
        return gp, gq

    return make_result(out, (p, q), backward)


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    """Row-wise cosine similarity; rows where either vector is all-zero give 0."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity shape mismatch {u.shape} vs {v.shape}")
    axis = _check_axis(u, axis)
    nu = np.sqrt((u.data * u.data).sum(axis=axis, keepdims=True))
    nv = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    ok = (nu > 0) & (nv > 0)
    if not ok.all():
        logger.warning("cosine_similarity: %d zero-norm row(s) treated as similarity 0", int((~ok).sum()))
    nu_s = np.where(ok, nu, 1.0)
    nv_s = np.where(ok, nv, 1.0)
    dot = (u.data * v.data).sum(axis=axis, keepdims=True)
    sim = np.where(ok, dot / (nu_s * nv_s), 0.0)

    def backward(g):
        g = np.expand_dims(g, axis) * ok
        gu = g * (v.data / (nu_s * nv_s) - sim * u.data / (nu_s * nu_s)) if u.requires_grad else None
        gv = g * (u.data / (nu_s * nv_s) - sim * v.data / (nv_s * nv_s)) if v.requires_grad else None
        return gu, gv

    return make_result(np.squeeze(sim, axis=axis), (u, v), backward)


def embedding(ids: np.ndarray, weight: Tensor) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return make_result(weight.data[ids], (weight,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep.astype(x.dtype)


def where_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant {0,1} mask (broadcast to x)."""
    m = np.asarray(mask, dtype=x.dtype)
    return make_result(x.data * m, (x,), lambda g: (_unbroadcast(g * m, x.shape),))
