"""Differentiable network primitives built on :mod:`rsdistill.tensor`.

Activations, softmax, batch and layer normalisation and 2-D convolution.
The heavier ops (batchnorm, conv2d, gelu) carry fused analytic backward
rules rather than being composed from scalar primitives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import BatchTooSmallError, ShapeError
from .tensor import Tensor, as_tensor, _make

GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + GELU_COEFF * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)
    return _make(out, (x,), bw, "gelu")


def _softmax_np(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax along the last axis (max-shifted)."""
    x = as_tensor(x)
    s = _softmax_np(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _make(s, (x,), bw, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
    return _make(out, (x,), bw, "log_softmax")


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "softmax": softmax, "log_softmax": log_softmax,
                "tanh": T.tanh}


def activation(kind: str, x) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}") from None


_ELEMENTWISE = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div, "pow": T.power,
                "exp": T.exp, "log": T.log, "sqrt": T.sqrt, "neg": T.neg}


def elementwise(kind: str, *inputs) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    """Exponential running mean/variance tracked by a batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, dim: int) -> "RunningStats":
        return cls(np.zeros(dim), np.ones(dim))


def batchnorm_1d(x, gamma, beta, stats: RunningStats | None = None, training: bool = True,
                 eps: float = BN_EPS) -> Tensor:
    """Per-column normalisation of a B×D batch.

    In training mode the batch mean and population variance are used and
    ``stats`` (if given) is updated in place. In eval mode ``stats`` is
    required and used as-is.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm_1d expects B×D input, got {x.shape}")
    b, d = x.shape
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"batchnorm_1d: affine params {gamma.shape}/{beta.shape} vs D={d}")
    if training:
        if b < 2:
            raise BatchTooSmallError(f"batchnorm in training mode needs B >= 2, got B={b}")
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = (centered * centered).mean(axis=0)
        if stats is not None:
            m = stats.momentum
            stats.mean = (1.0 - m) * stats.mean + m * mu
            stats.var = (1.0 - m) * stats.var + m * var
    else:
        if stats is None:
            raise ValueError("batchnorm_1d in eval mode needs running stats")
        centered = x.data - stats.mean
        var = stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        dg = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        db = g.sum(axis=0) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                dx = (inv_std / b) * (b * dxhat - dxhat.sum(axis=0)
                                      - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dx = dxhat * inv_std
        return dx, dg, db
    return _make(out, (x, gamma, beta), bw, "batchnorm")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; composed from primitive ops."""
    x = as_tensor(x)
    shape = x.shape
    mu = T.expand(T.reduce_mean(x, -1, keepdims=True), shape)
    centered = x - mu
    var = T.expand(T.reduce_mean(centered * centered, -1, keepdims=True), shape)
    xhat = centered / T.sqrt(var + eps)
    lead = shape[:-1]
    g = T.expand(T.reshape(gamma, (1,) * len(lead) + gamma.shape), shape)
    b = T.expand(T.reshape(beta, (1,) * len(lead) + beta.shape), shape)
    return xhat * g + b


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B×C×H×W] with weights [O×C×kh×kw] via im2col."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}×{kw} larger than padded input {hp}×{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = cols @ wmat.T
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} filters")
        out = out + b.data
        parents.append(b)
    out = out.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(bsz, ho, wo, c, kh, kw)
            gxp = np.zeros((bsz, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(gmat.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)
    return _make(np.ascontiguousarray(out), tuple(parents), bw, "conv2d")
