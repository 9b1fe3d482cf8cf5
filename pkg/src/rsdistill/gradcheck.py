"""Central finite-difference checks for every differentiable op.

Each case draws a random shape from a seed, builds leaf tensors, and
contracts the op output with a fixed random weight so that every output
element contributes to the scalar being differentiated.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from . import rsd
from . import tensor as T
from .nn import Linear
from .tensor import Tensor

FD_STEP = 1e-5
ANALYTIC_FLOOR = 1e-8
TOLERANCE = 1e-4


def numerical_grad(loss_fn: Callable[[], Tensor], leaf: Tensor, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = ANALYTIC_FLOOR) -> float:
    """Largest |a - n| / max(|a|, |n|) over entries with |a| > floor."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    mask = np.abs(a) > floor
    if not np.any(mask):
        return float(np.max(np.abs(a - n), initial=0.0))
    a, n = a[mask], n[mask]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


def gradcheck(loss_fn: Callable[[], Tensor], leaves: list, h: float = FD_STEP) -> float:
    """Max relative error between backward() and central differences over all leaves."""
    for leaf in leaves:
        leaf.grad = None
        leaf.data = np.array(leaf.data, dtype=np.float64)
    loss_fn().backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
    return max(max_rel_error(a, numerical_grad(loss_fn, l, h)) for a, l in zip(analytic, leaves))


def _leaf(rng, shape, kind: str = "normal") -> Tensor:
    x = rng.normal(size=shape)
    if kind == "positive":
        x = np.abs(x) + 0.5
    elif kind == "away_from_zero":
        x = np.sign(x) * (np.abs(x) + 0.1)
    return Tensor(x, requires_grad=True)


def _contract(out: Tensor, w: np.ndarray) -> Tensor:
    return T.reduce_sum(out * w)


def _case(op: Callable, *leaves: Tensor, rng) -> tuple[Callable[[], Tensor], list]:
    w = rng.normal(size=op(*leaves).shape)
    return (lambda: _contract(op(*leaves), w)), list(leaves)


def _shape2(rng):
    return int(rng.integers(2, 6)), int(rng.integers(2, 6))


# each builder: rng -> (loss_fn, leaves)
def _b_binary(fn, kind_b="normal"):
    def build(rng):
        s = _shape2(rng)
        return _case(fn, _leaf(rng, s), _leaf(rng, s, kind_b), rng=rng)
    return build


def _b_unary(fn, kind="normal"):
    def build(rng):
        return _case(fn, _leaf(rng, _shape2(rng), kind), rng=rng)
    return build


def _b_matmul(rng):
    b, k, n = (int(v) for v in rng.integers(2, 6, size=3))
    return _case(T.matmul, _leaf(rng, (b, k)), _leaf(rng, (k, n)), rng=rng)


def _b_bmm(rng):
    m, i, k, j = (int(v) for v in rng.integers(2, 5, size=4))
    return _case(T.bmm, _leaf(rng, (m, i, k)), _leaf(rng, (m, k, j)), rng=rng)


def _b_reduce(fn):
    def build(rng):
        s = (int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 4)))
        axis = int(rng.integers(0, 3))
        return _case(lambda x: fn(x, axis), _leaf(rng, s), rng=rng)
    return build


def _b_scalar_broadcast(rng):
    s = _shape2(rng)
    return _case(lambda a, c: T.mul(a, c) + c, _leaf(rng, s), _leaf(rng, ()), rng=rng)


def _b_reshape(rng):
    a, b = _shape2(rng)
    return _case(lambda x: T.reshape(x, (b, a)) * 1.0, _leaf(rng, (a, b)), rng=rng)


def _b_transpose(rng):
    s = tuple(int(v) for v in rng.integers(2, 4, size=3))
    return _case(lambda x: T.transpose(x, (2, 0, 1)), _leaf(rng, s), rng=rng)


def _b_expand(rng):
    a, b = _shape2(rng)
    return _case(lambda x: T.expand(x, (a, b)), _leaf(rng, (1, b)), rng=rng)


def _b_concat(rng):
    a, b = _shape2(rng)
    return _case(lambda x, y: T.concat([x, y], axis=0), _leaf(rng, (a, b)), _leaf(rng, (2, b)),
                 rng=rng)


def _b_take_rows(rng):
    a, b = _shape2(rng)
    idx = rng.integers(0, a, size=a + 2)
    return _case(lambda x: T.take_rows(x, idx), _leaf(rng, (a, b)), rng=rng)


def _b_softmax(fn):
    def build(rng):
        s = (int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 6)))
        return _case(fn, _leaf(rng, s), rng=rng)
    return build


def _b_batchnorm(training):
    def build(rng):
        b, d = int(rng.integers(3, 7)), int(rng.integers(2, 5))
        stats = ops.RunningStats(rng.normal(size=d), np.abs(rng.normal(size=d)) + 0.5)
        fn = lambda x, g, be: ops.batchnorm_1d(x, g, be, ops.RunningStats(
            stats.mean.copy(), stats.var.copy()), training=training)
        return _case(fn, _leaf(rng, (b, d)), _leaf(rng, (d,)), _leaf(rng, (d,)), rng=rng)
    return build


def _b_layer_norm(rng):
    b, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    return _case(ops.layer_norm, _leaf(rng, (b, d)), _leaf(rng, (d,)), _leaf(rng, (d,)), rng=rng)


def _b_conv2d(rng):
    b, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h = int(rng.integers(4, 6))
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    fn = lambda x, w, bias: ops.conv2d(x, w, bias, stride, pad)
    return _case(fn, _leaf(rng, (b, c, h, h)), _leaf(rng, (o, c, k, k)), _leaf(rng, (o,)),
                 rng=rng)


def _b_standardize(rng):
    return _case(rsd.standardize_columns, _leaf(rng, _shape2(rng)), rng=rng)


def _b_pearson(rng):
    b, d = int(rng.integers(3, 7)), int(rng.integers(1, 5))
    return _case(lambda t, s: rsd.pearson_matrix(t, s).p, _leaf(rng, (b, d)), _leaf(rng, (b, d)),
                 rng=rng)


def _b_rsd_loss(rng):
    b, d = int(rng.integers(3, 7)), int(rng.integers(1, 5))
    kappa = float(rng.choice([0.0, 5e-3, 0.5, 1.0]))
    leaves = [_leaf(rng, (b, d)), _leaf(rng, (b, d))]
    return (lambda: rsd.rsd_loss(rsd.pearson_matrix(*leaves), kappa)), leaves


def _b_ce(rng):
    b, c = _shape2(rng)
    labels = rng.integers(0, c, size=b)
    leaves = [_leaf(rng, (b, c))]
    return (lambda: rsd.ce_loss(leaves[0], labels)), leaves


def _b_kld(rng):
    b, c = _shape2(rng)
    tau = float(rng.uniform(1.0, 4.0))
    leaves = [_leaf(rng, (b, c)), _leaf(rng, (b, c))]
    return (lambda: rsd.kd_kld_loss(leaves[0], leaves[1], tau)), leaves


def _b_feature_mse(rng):
    b, ds, dt = (int(v) for v in rng.integers(2, 5, size=3))
    psi = Linear(ds, dt, rng)
    leaves = [_leaf(rng, (b, ds))] + psi.parameters()
    ft = rng.normal(size=(b, dt))
    return (lambda: rsd.feature_mse_loss(leaves[0], ft, psi)), leaves


def _aad(rng):
    ds, dt = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    return rsd.AadModule(ds, dt, expansion_factor=2, rng=rng)


def _b_aad(rng):
    m = _aad(rng)
    b = int(rng.integers(3, 6))
    x = _leaf(rng, (b, m.d_s))
    return _case(lambda z: rsd.aad_forward(m, z, training=True), x, rng=rng)[0], \
        [x] + m.parameters()


def _b_full_objective(rng):
    m = _aad(rng)
    b, c = int(rng.integers(4, 7)), 3
    cfg = rsd.RsdConfig(lam=float(rng.uniform(0.5, 3.0)), kappa=float(rng.choice([0.0, 5e-3, 1.0])))
    logits = _leaf(rng, (b, c))
    zs = _leaf(rng, (b, m.d_s))
    zt = Tensor(rng.normal(size=(b, m.d_t)))
    labels = rng.integers(0, c, size=b)
    fn = lambda: rsd.full_objective(logits, labels, zt, zs, m, cfg, training=True)[0]
    return fn, [logits, zs] + m.parameters()


SUITE: dict = {
    "add": _b_binary(T.add),
    "sub": _b_binary(T.sub),
    "mul": _b_binary(T.mul),
    "div": _b_binary(T.div, "away_from_zero"),
    "scalar_broadcast": _b_scalar_broadcast,
    "pow": _b_unary(lambda x: T.power(x, 2.5), "positive"),
    "exp": _b_unary(T.exp),
    "log": _b_unary(T.log, "positive"),
    "sqrt": _b_unary(T.sqrt, "positive"),
    "neg": _b_unary(T.neg),
    "tanh": _b_unary(T.tanh),
    "matmul": _b_matmul,
    "bmm": _b_bmm,
    "sum": _b_reduce(T.reduce_sum),
    "mean": _b_reduce(T.reduce_mean),
    "var": _b_reduce(T.reduce_var),
    "reshape": _b_reshape,
    "transpose": _b_transpose,
    "expand": _b_expand,
    "concat": _b_concat,
    "take_rows": _b_take_rows,
    "relu": _b_unary(ops.relu, "away_from_zero"),
    "gelu": _b_unary(ops.gelu),
    "softmax": _b_softmax(ops.softmax),
    "log_softmax": _b_softmax(ops.log_softmax),
    "batchnorm_train": _b_batchnorm(True),
    "batchnorm_eval": _b_batchnorm(False),
    "layer_norm": _b_layer_norm,
    "conv2d": _b_conv2d,
    "standardize_columns": _b_standardize,
    "pearson_matrix": _b_pearson,
    "rsd_loss": _b_rsd_loss,
    "ce_loss": _b_ce,
    "kd_kld_loss": _b_kld,
    "feature_mse_loss": _b_feature_mse,
    "aad_forward": _b_aad,
    "full_objective": _b_full_objective,
}


@dataclass
class GradcheckReport:
    errors: dict
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def lines(self) -> list:
        return [f"{'PASS' if e < self.tolerance else 'FAIL'} {name:<22s} max rel err {e:.3e}"
                for name, e in self.errors.items()]


def run_suite(seeds=range(5), ops_subset=None, tolerance: float = TOLERANCE) -> GradcheckReport:
    """Max relative error per op over the given seeds."""
    t0 = time.perf_counter()
    errors = {}
    for name, builder in SUITE.items():
        if ops_subset is not None and name not in ops_subset:
            continue
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            loss_fn, leaves = builder(rng)
            worst = max(worst, gradcheck(loss_fn, leaves))
        errors[name] = worst
    return GradcheckReport(errors, tolerance, time.perf_counter() - t0)
