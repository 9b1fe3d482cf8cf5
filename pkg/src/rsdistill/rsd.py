"""Redundancy suppression distillation objective, the decoupler, and baselines.

The cross-correlation between teacher and student embeddings is taken
over the batch after standardising each column to zero mean and unit L2
norm, so ``standardize(zt).T @ standardize(zs)`` is exactly the Pearson
correlation matrix. The loss pushes that matrix towards the identity; the
off-diagonal squared errors are down-weighted by ``kappa``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import ops
from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm1d, Linear, Module
from .tensor import Tensor

log = logging.getLogger(__name__)

STANDARDIZE_EPS = 1e-12
DEFAULT_KAPPA = 5e-3
DEFAULT_LAMBDA = 2.0
DEFAULT_EXPANSION = 4


@dataclass(frozen=True)
class RsdConfig:
    lam: float = DEFAULT_LAMBDA
    kappa: float = DEFAULT_KAPPA
    expansion_factor: float = DEFAULT_EXPANSION
    temperature: float = 4.0
    apply_to: str = "penultimate"
    use_aad: bool = True

    def __post_init__(self):
        for name in ("lam", "kappa", "expansion_factor"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")
        if self.expansion_factor == 0:
            raise ConfigError("expansion_factor must be positive")
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.apply_to not in ("penultimate", "logits"):
            raise ConfigError(f"apply_to must be 'penultimate' or 'logits', got {self.apply_to!r}")


@dataclass(frozen=True)
class EmbeddingBatch:
    """A B×D block of activations tagged with where it came from."""

    values: Tensor
    source: str = "student"
    layer: str = "penultimate"

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ShapeError(f"embeddings must be B×D, got shape {v.shape}")
        if v.shape[0] < 2:
            raise ShapeError(f"correlation needs a batch of at least 2, got B={v.shape[0]}")
        if not np.all(np.isfinite(v.data)):
            raise ValueError(f"{self.source} embeddings contain non-finite values")


@dataclass(frozen=True)
class TargetMatrix:
    """The identity target; never materialised beyond its dimension."""

    dim: int

    def entry(self, i: int, j: int) -> float:
        return 1.0 if i == j else 0.0

    def dense(self) -> np.ndarray:
        return np.eye(self.dim)


@dataclass(frozen=True)
class CorrelationMatrix:
    p: Tensor
    batch_size: int

    @property
    def dim(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    rsd_diag: float
    rsd_offdiag: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _values(z) -> Tensor:
    return z.values if isinstance(z, EmbeddingBatch) else T.as_tensor(z)


def standardize_columns(x) -> Tensor:
    """Zero-mean, unit-L2-norm columns: (x - mean) / sqrt(max(sum((x - mean)^2), eps)).

    eps acts as a floor rather than an additive term so that every
    non-degenerate column is normalised exactly; constant columns divide
    by sqrt(eps) and come out near zero.
    """
    x = _values(x)
    if x.ndim != 2:
        raise ShapeError(f"standardize_columns expects B×D, got {x.shape}")
    b, _ = x.shape
    if b < 2:
        raise ShapeError(f"standardize_columns needs B >= 2, got B={b}")
    centered = x - T.expand(T.reduce_mean(x, 0, keepdims=True), x.shape)
    sumsq = T.reduce_sum(centered * centered, 0, keepdims=True)
    dead = sumsq.data < STANDARDIZE_EPS
    if np.any(dead):
        log.warning("degenerate (near-constant) columns %s: correlations set by epsilon",
                    np.flatnonzero(dead.ravel()).tolist())
        sumsq = sumsq * (~dead).astype(np.float64) + dead * STANDARDIZE_EPS
    return centered / T.expand(T.sqrt(sumsq), x.shape)


def pearson_matrix(zt, zs) -> CorrelationMatrix:
    """P[i, j] = Pearson correlation of teacher unit i and student unit j over the batch."""
    t, s = _values(zt), _values(zs)
    if t.ndim != 2 or s.ndim != 2:
        raise ShapeError(f"pearson_matrix expects B×D inputs, got {t.shape} and {s.shape}")
    if t.shape[0] != s.shape[0]:
        raise ShapeError(f"batch sizes differ: teacher B={t.shape[0]}, student B={s.shape[0]}")
    if t.shape[1] != s.shape[1]:
        raise ShapeError(f"dimension mismatch: teacher D_t={t.shape[1]}, student D_s={s.shape[1]}; "
                         "adapt student first")
    p = T.matmul(T.transpose(standardize_columns(t)), standardize_columns(s))
    return CorrelationMatrix(p, t.shape[0])


def _as_corr(p) -> Tensor:
    return p.p if isinstance(p, CorrelationMatrix) else T.as_tensor(p)


def _weights(d: int, kappa: float) -> np.ndarray:
    w = np.full((d, d), float(kappa))
    np.fill_diagonal(w, 1.0)
    return w


def rsd_loss(p, kappa: float = DEFAULT_KAPPA) -> Tensor:
    """mean over all D² entries of w_ij (P_ij - I_ij)², w = 1 on the diagonal, kappa off it."""
    pm = _as_corr(p)
    if pm.ndim != 2 or pm.shape[0] != pm.shape[1]:
        raise ShapeError(f"rsd_loss expects a square matrix, got {pm.shape}")
    d = pm.shape[0]
    diff = pm - np.eye(d)
    return T.reduce_mean(diff * diff * _weights(d, kappa))


def rsd_terms(p, kappa: float = DEFAULT_KAPPA) -> tuple[float, float]:
    """Diagonal and kappa-weighted off-diagonal shares of ``rsd_loss`` (they sum to it)."""
    pm = _as_corr(p).data
    d = pm.shape[0]
    sq = (pm - np.eye(d)) ** 2
    diag = np.trace(sq) / (d * d)
    off = kappa * (sq.sum() - np.trace(sq)) / (d * d)
    return float(diag), float(off)


# ---------------------------------------------------------------------------
# decoupler
# ---------------------------------------------------------------------------

def expanded_dim(d_s: int, factor) -> int:
    """round(factor * d_s), halves rounded up."""
    d_e = int(np.floor(float(factor) * d_s + 0.5))
    if d_e < 1:
        raise ConfigError(f"expansion factor {factor} gives an empty hidden layer for D_s={d_s}")
    return d_e


def aad_param_count(d_s: int, d_e: int, d_t: int) -> int:
    """Expander weights+bias, batchnorm gamma+beta, adaptor weights+bias."""
    return d_s * d_e + d_e + 2 * d_e + d_e * d_t + d_t


class AadModule(Module):
    """Expander -> batchnorm -> GELU -> adaptor, mapping D_s to D_t.

    Only used during training; student checkpoints never contain it.
    """

    def __init__(self, d_s: int, d_t: int, expansion_factor=DEFAULT_EXPANSION,
                 rng: Optional[np.random.Generator] = None, seed: int = 0):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.d_s, self.d_t = d_s, d_t
        self.expansion_factor = expansion_factor
        self.d_e = expanded_dim(d_s, expansion_factor)
        self.expander = Linear(d_s, self.d_e, rng)
        self.norm = BatchNorm1d(self.d_e)
        self.adaptor = Linear(self.d_e, d_t, rng)

    def __call__(self, zs_raw, training: Optional[bool] = None) -> Tensor:
        return aad_forward(self, zs_raw, training)

    def param_count(self) -> int:
        return self.num_parameters()


def aad_forward(m: AadModule, zs_raw, training: Optional[bool] = None) -> Tensor:
    x = _values(zs_raw)
    if x.ndim != 2 or x.shape[1] != m.d_s:
        raise ShapeError(f"AAD expects B×{m.d_s} input, got {x.shape}")
    if training is None:
        training = m.training
    h = m.expander(x)
    h = ops.batchnorm_1d(h, m.norm.gamma, m.norm.beta, m.norm.stats, training=training)
    return m.adaptor(ops.gelu(h))


# ---------------------------------------------------------------------------
# baseline losses
# ---------------------------------------------------------------------------

def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def ce_loss(logits, labels) -> Tensor:
    """Mean negative log-softmax at the label."""
    logits = T.as_tensor(logits)
    b, c = logits.shape
    picked = ops.log_softmax(logits) * one_hot(labels, c)
    return -T.reduce_sum(picked) / b


def kd_kld_loss(zs, zt, temperature: float = 4.0) -> Tensor:
    """tau² · batch-mean KL(softmax(zt/tau) || softmax(zs/tau))."""
    zs, zt = T.as_tensor(zs), T.as_tensor(zt)
    if zs.shape != zt.shape:
        raise ShapeError(f"kd_kld_loss: student {zs.shape} vs teacher {zt.shape}")
    tau = float(temperature)
    log_ps = ops.log_softmax(zs / tau)
    log_pt = ops.log_softmax(zt / tau)
    kl = T.reduce_sum((log_pt - log_ps) * T.exp(log_pt)) / zs.shape[0]
    return kl * (tau * tau)


def feature_mse_loss(fs, ft, psi: Optional[Linear] = None) -> Tensor:
    fs, ft = T.as_tensor(fs), T.as_tensor(ft)
    mapped = psi(fs) if psi is not None else fs
    if mapped.shape != ft.shape:
        raise ShapeError(f"feature_mse_loss: mapped student {mapped.shape} vs teacher {ft.shape}")
    diff = mapped - ft
    return T.reduce_mean(diff * diff)


# ---------------------------------------------------------------------------
# assembled objectives
# ---------------------------------------------------------------------------

def full_objective(logits_s, labels, zt, zs_raw, aad: Optional[AadModule], cfg: RsdConfig,
                   training: Optional[bool] = None) -> tuple[Tensor, LossBreakdown]:
    """CE + lambda * rsd_loss(pearson(zt, aad(zs_raw)), kappa).

    With ``aad=None`` the raw student embedding is correlated directly and
    must already have the teacher's width.
    """
    ce = ce_loss(logits_s, labels)
    zs = aad_forward(aad, zs_raw, training) if aad is not None else _values(zs_raw)
    p = pearson_matrix(zt, zs)
    rsd = rsd_loss(p, cfg.kappa)
    total = ce + rsd * cfg.lam
    diag, off = rsd_terms(p, cfg.kappa)
    return total, LossBreakdown(ce.item(), diag, off, total.item())


def rsd_on_logits(zt_logits, zs_logits, kappa: float = DEFAULT_KAPPA) -> Tensor:
    t, s = T.as_tensor(zt_logits), T.as_tensor(zs_logits)
    if t.shape[-1] != s.shape[-1]:
        raise ShapeError(f"class counts differ: teacher {t.shape[-1]}, student {s.shape[-1]}")
    return rsd_loss(pearson_matrix(t, s), kappa)
