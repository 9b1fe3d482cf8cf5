import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsdistill import ops
from rsdistill.errors import ConfigError, ShapeError
from rsdistill.gradcheck import gradcheck
from rsdistill.nn import Linear
from rsdistill.rsd import (AadModule, EmbeddingBatch, RsdConfig, TargetMatrix, aad_forward,
                           aad_param_count, ce_loss, expanded_dim, feature_mse_loss,
                           full_objective, kd_kld_loss, one_hot, pearson_matrix, rsd_loss,
                           rsd_on_logits, rsd_terms, standardize_columns)
from rsdistill.tensor import Tensor


def pearson_oracle(zt, zs):
    """Double loop over unit pairs, sums written out by hand."""
    zt, zs = np.asarray(zt, float), np.asarray(zs, float)
    b, d = zt.shape
    out = np.zeros((d, d))
    for i in range(d):
        mt = sum(zt[k, i] for k in range(b)) / b
        for j in range(zs.shape[1]):
            ms = sum(zs[k, j] for k in range(b)) / b
            num = sum((zt[k, i] - mt) * (zs[k, j] - ms) for k in range(b))
            vt = sum((zt[k, i] - mt) ** 2 for k in range(b))
            vs = sum((zs[k, j] - ms) ** 2 for k in range(b))
            out[i, j] = num / np.sqrt(vt * vs)
    return out


def P(zt, zs):
    return pearson_matrix(Tensor(zt), Tensor(zs)).p.data


# -- standardize ------------------------------------------------------------

def test_standardize_hand_column():
    out = standardize_columns(Tensor([[1.0], [2.0], [3.0]])).data[:, 0]
    np.testing.assert_allclose(out, [-1 / np.sqrt(2), 0, 1 / np.sqrt(2)], atol=1e-12)


def test_standardize_constant_column_is_near_zero_and_logged(caplog):
    with caplog.at_level(logging.WARNING):
        out = standardize_columns(Tensor([[5.0], [5.0], [5.0]])).data
    assert np.all(np.abs(out) < 1e-9)
    assert "degenerate" in caplog.text


def test_standardize_unit_norm_columns():
    x = np.random.default_rng(0).normal(size=(8, 3))
    out = standardize_columns(Tensor(x)).data
    np.testing.assert_allclose(np.sqrt((out ** 2).sum(axis=0)), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-15)


# -- pearson ----------------------------------------------------------------

def test_self_correlation_diagonal_is_one():
    z = np.random.default_rng(1).normal(size=(10, 4))
    np.testing.assert_allclose(np.diag(P(z, z)), 1.0, atol=1e-9)


def test_perfect_anticorrelation():
    np.testing.assert_allclose(P([[1.0], [2.0], [3.0]], [[-1.0], [-2.0], [-3.0]]), [[-1.0]],
                               atol=1e-12)


def test_integer_batch_matches_double_loop():
    rng = np.random.default_rng(2)
    zt = rng.integers(-5, 6, size=(4, 2)).astype(float)
    zs = rng.integers(-5, 6, size=(4, 2)).astype(float)
    zt[:, 0] += [0, 1, 2, 3]     # make sure no column is constant
    zs[:, 1] += [3, 0, 1, 2]
    np.testing.assert_allclose(P(zt, zs), pearson_oracle(zt, zs), atol=1e-12)


def test_dimension_mismatch_tells_caller_to_adapt():
    with pytest.raises(ShapeError, match="adapt student first"):
        pearson_matrix(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 2))))


def test_batch_mismatch_and_too_small_batch():
    with pytest.raises(ShapeError):
        pearson_matrix(Tensor(np.ones((4, 2))), Tensor(np.ones((5, 2))))
    with pytest.raises(ShapeError):
        EmbeddingBatch(Tensor(np.ones((1, 2))))


def test_embedding_batch_rejects_non_finite():
    with pytest.raises(ValueError):
        EmbeddingBatch(Tensor([[1.0, np.nan], [0.0, 1.0]]))


def test_target_matrix_is_identity():
    t = TargetMatrix(3)
    np.testing.assert_array_equal(t.dense(), np.eye(3))
    assert t.entry(1, 1) == 1.0 and t.entry(0, 2) == 0.0


batch_dims = st.tuples(st.integers(3, 12), st.integers(1, 5))


@settings(max_examples=40, deadline=None)
@given(batch_dims, st.integers(0, 2 ** 31))
def test_affine_invariance_and_sign_flip(shape, seed):
    rng = np.random.default_rng(seed)
    zt, zs = rng.normal(size=shape), rng.normal(size=shape)
    base = P(zt, zs)
    assert np.all(np.abs(base) <= 1 + 1e-9)
    a, c = rng.uniform(0.1, 10, size=shape[1]), rng.uniform(0.1, 10, size=shape[1])
    b, d = rng.normal(size=shape[1]) * 5, rng.normal(size=shape[1]) * 5
    np.testing.assert_allclose(P(zt * a + b, zs * c + d), base, atol=1e-9)
    i = int(rng.integers(shape[1]))
    flipped = zt.copy()
    flipped[:, i] *= -1
    pf = P(flipped, zs)
    np.testing.assert_array_equal(pf[i], -base[i])
    np.testing.assert_array_equal(np.delete(pf, i, 0), np.delete(base, i, 0))


@settings(max_examples=40, deadline=None)
@given(batch_dims, st.integers(0, 2 ** 31))
def test_batch_permutation_invariance(shape, seed):
    rng = np.random.default_rng(seed)
    zt, zs = rng.normal(size=shape), rng.normal(size=shape)
    perm = rng.permutation(shape[0])
    np.testing.assert_allclose(P(zt[perm], zs[perm]), P(zt, zs), atol=1e-12, rtol=0)


# -- rsd loss ---------------------------------------------------------------

HALF = np.array([[1.0, 0.5], [0.5, 1.0]])


@pytest.mark.parametrize("kappa", [0.0, 5e-3, 1.0, 7.0])
def test_identity_has_zero_loss(kappa):
    assert rsd_loss(Tensor(np.eye(4)), kappa).item() == 0.0


def test_hand_values():
    assert rsd_loss(Tensor(HALF), 1.0).item() == pytest.approx(0.125, abs=1e-15)
    assert rsd_loss(Tensor(HALF), 0.0).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.floats(0, 1), st.integers(0, 2 ** 31))
def test_loss_decomposition(d, kappa, seed):
    p = np.random.default_rng(seed).uniform(-1, 1, size=(d, d))
    sq = (p - np.eye(d)) ** 2
    diag_part = np.trace(sq) / d ** 2
    full = sq.mean()
    # w = 1 on the diagonal, kappa off it == (1-kappa) diag share + kappa full mse
    want = (1 - kappa) * diag_part + kappa * full
    got = rsd_loss(Tensor(p), kappa).item()
    assert got == pytest.approx(want, abs=1e-12)
    diag, off = rsd_terms(Tensor(p), kappa)
    assert diag + off == pytest.approx(got, abs=1e-12)
    if kappa == 1.0:
        assert got == pytest.approx(full, abs=1e-12)


def test_kappa_zero_ignores_off_diagonal_exactly():
    rng = np.random.default_rng(4)
    p = np.diag(rng.uniform(-1, 1, size=5))
    base = rsd_loss(Tensor(p), 0.0).item()
    noise = rng.normal(size=(5, 5))
    np.fill_diagonal(noise, 0.0)
    assert rsd_loss(Tensor(p + noise), 0.0).item() == base


def test_orthogonal_standardized_columns_give_zero_loss():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(12, 4))
    x -= x.mean(axis=0)
    q, _ = np.linalg.qr(x)
    # columns of q are orthonormal but need zero mean; project the mean out and re-orthonormalise
    centered = q - q.mean(axis=0)
    q2, _ = np.linalg.qr(centered)
    q2 -= q2.mean(axis=0)
    z = q2 * 3.0 + 1.0
    loss = rsd_loss(pearson_matrix(Tensor(z), Tensor(z)), 0.5).item()
    assert loss < 1e-18


@pytest.mark.parametrize("kappa", [5e-3, 0.5, 1.0])
def test_one_step_reduces_off_diagonal_mass(kappa):
    # the loss is quadratic in P; step P itself against its gradient
    rng = np.random.default_rng(6)
    z = rng.normal(size=(16, 5))
    p = Tensor(pearson_matrix(Tensor(z), Tensor(z @ rng.normal(size=(5, 5)))).p.data,
               requires_grad=True)
    off = ~np.eye(5, dtype=bool)
    before = float(np.sum(p.data[off] ** 2))
    assert before > 0
    rsd_loss(p, kappa).backward()
    after = float(np.sum((p.data - 1e-3 * p.grad)[off] ** 2))
    assert after < before


def test_rsd_loss_rejects_non_square():
    with pytest.raises(ShapeError):
        rsd_loss(Tensor(np.ones((2, 3))))


# -- AAD --------------------------------------------------------------------

def test_expanded_dim_rounds_half_up():
    assert expanded_dim(32, 4) == 128
    assert expanded_dim(5, 0.5) == 3
    assert expanded_dim(3, 1.5) == 5
    with pytest.raises(ConfigError):
        expanded_dim(2, 0.1)


def test_aad_zero_weights_give_zero_output():
    m = AadModule(6, 5, 2, seed=0)
    for p in m.parameters():
        p.data = np.zeros_like(p.data)
    out = aad_forward(m, Tensor(np.random.default_rng(0).normal(size=(4, 6))), training=True)
    assert out.shape == (4, 5)
    np.testing.assert_array_equal(out.data, 0.0)


def test_aad_identity_weights_reduce_to_gelu_of_standardized():
    m = AadModule(4, 4, 1, seed=0)
    m.expander.weight.data = np.eye(4)
    m.expander.bias.data = np.zeros(4)
    m.adaptor.weight.data = np.eye(4)
    m.adaptor.bias.data = np.zeros(4)
    x = np.random.default_rng(1).normal(size=(6, 4))
    want_bn = (x - x.mean(0)) / np.sqrt(x.var(0) + 1e-5)
    want = 0.5 * want_bn * (1 + np.tanh(np.sqrt(2 / np.pi) * (want_bn + 0.044715 * want_bn ** 3)))
    out = aad_forward(m, Tensor(x), training=True).data
    np.testing.assert_allclose(out, want, atol=1e-6)


def test_aad_shape_contract():
    m = AadModule(8, 12, 4, seed=3)
    assert m.d_e == 32
    assert aad_forward(m, Tensor(np.ones((4, 8)) * np.arange(4)[:, None])).shape == (4, 12)
    with pytest.raises(ShapeError):
        aad_forward(m, Tensor(np.ones((4, 7))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.sampled_from([0.5, 1, 1.5, 2, 4]), st.integers(1, 40))
def test_aad_parameter_count_matches_closed_form(d_s, factor, d_t):
    d_e = expanded_dim(d_s, factor)
    m = AadModule(d_s, d_t, factor, seed=0)
    assert m.param_count() == aad_param_count(d_s, d_e, d_t)
    assert m.param_count() == d_s * d_e + d_e + 2 * d_e + d_e * d_t + d_t


# -- baselines --------------------------------------------------------------

def test_ce_uniform_logits_is_log_c():
    assert ce_loss(Tensor(np.zeros((4, 5))), [0, 1, 2, 3]).item() == pytest.approx(np.log(5))


def test_one_hot_rejects_out_of_range():
    with pytest.raises(IndexError):
        one_hot([0, 3], 3)


def test_kd_identical_logits_is_zero():
    z = np.random.default_rng(0).normal(size=(4, 3))
    assert abs(kd_kld_loss(Tensor(z), Tensor(z), 4.0).item()) < 1e-15


def test_kd_matches_direct_kl():
    rng = np.random.default_rng(1)
    zs, zt, tau = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), 2.0
    pt = np.exp(zt / tau) / np.exp(zt / tau).sum(1, keepdims=True)
    ps = np.exp(zs / tau) / np.exp(zs / tau).sum(1, keepdims=True)
    want = tau ** 2 * np.mean(np.sum(pt * np.log(pt / ps), axis=1))
    assert kd_kld_loss(Tensor(zs), Tensor(zt), tau).item() == pytest.approx(want, rel=1e-12)


def test_feature_mse_identity_adaptor_is_zero():
    f = np.random.default_rng(0).normal(size=(4, 3))
    psi = Linear(3, 3, np.random.default_rng(0))
    psi.weight.data, psi.bias.data = np.eye(3), np.zeros(3)
    assert feature_mse_loss(Tensor(f), Tensor(f), psi).item() == 0.0
    with pytest.raises(ShapeError):
        feature_mse_loss(Tensor(f), Tensor(np.ones((4, 2))))


# -- full objective ---------------------------------------------------------

def _instance(seed, d_s=6, d_t=5, b=8, c=3):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(b, c)), requires_grad=True), rng.integers(0, c, size=b),
            Tensor(rng.normal(size=(b, d_t))), Tensor(rng.normal(size=(b, d_s)), requires_grad=True),
            AadModule(d_s, d_t, 2, seed=seed))


def test_lambda_zero_is_plain_ce():
    logits, y, zt, zs, aad = _instance(0)
    total, br = full_objective(logits, y, zt, zs, aad, RsdConfig(lam=0.0), training=True)
    assert total.item() == ce_loss(logits, y).item()
    assert br.ce == br.total


def test_recomposition_oracle():
    logits, y, zt, zs, aad = _instance(1)
    cfg = RsdConfig(lam=1.7, kappa=0.02)
    total, br = full_objective(logits, y, zt, zs, aad, cfg, training=True)
    lsm = logits.data - logits.data.max(1, keepdims=True)
    lsm = lsm - np.log(np.exp(lsm).sum(1, keepdims=True))
    ce = -np.mean(lsm[np.arange(len(y)), y])
    aad.norm.stats = ops.RunningStats.fresh(aad.d_e)
    zs_a = aad_forward(aad, zs, training=True).data
    p = pearson_oracle(zt.data, zs_a)
    w = np.full(p.shape, 0.02)
    np.fill_diagonal(w, 1.0)
    want = ce + 1.7 * np.mean(w * (p - np.eye(len(p))) ** 2)
    assert total.item() == pytest.approx(want, abs=1e-12)
    assert br.ce == pytest.approx(ce, abs=1e-12)
    assert br.rsd_diag + br.rsd_offdiag == pytest.approx((want - ce) / 1.7, abs=1e-12)


def test_perfect_prediction_and_identity_correlation_gives_near_zero():
    b, d = 12, 3
    rng = np.random.default_rng(2)
    x = rng.normal(size=(b, d))
    x -= x.mean(0)
    q, _ = np.linalg.qr(x)
    q -= q.mean(0)
    q, _ = np.linalg.qr(q)
    q -= q.mean(0)
    y = np.arange(b) % 3
    logits = Tensor(np.eye(3)[y] * 60.0)
    total, _ = full_objective(logits, y, Tensor(q), Tensor(q), None, RsdConfig(), training=True)
    assert total.item() < 1e-20


def test_full_objective_without_aad_needs_equal_widths():
    logits, y, zt, zs, _ = _instance(3)
    with pytest.raises(ShapeError, match="adapt student first"):
        full_objective(logits, y, zt, zs, None, RsdConfig())


def test_full_objective_gradient_through_aad():
    logits, y, zt, zs, aad = _instance(4, d_s=24, d_t=32, b=6)
    cfg = RsdConfig()
    err = gradcheck(lambda: full_objective(logits, y, zt, zs, aad, cfg, training=True)[0],
                    [logits, zs] + aad.parameters())
    assert err < 1e-4


# -- logits variant ---------------------------------------------------------

def test_rsd_logits_identical_logits():
    z = np.random.default_rng(7).normal(size=(10, 3))
    kappa = 0.3
    loss = rsd_on_logits(Tensor(z), Tensor(z), kappa).item()
    pt = pearson_oracle(z, z)
    off = pt - np.diag(np.diag(pt))
    assert loss == pytest.approx(kappa * np.sum(off ** 2) / 9, abs=1e-12)


def test_rsd_logits_kappa_zero_affine_copy():
    z = np.random.default_rng(8).normal(size=(10, 3))
    assert abs(rsd_on_logits(Tensor(z), Tensor(z * [2, 3, 0.5] - 1), 0.0).item()) < 1e-9


def test_rsd_logits_matches_oracle():
    rng = np.random.default_rng(9)
    zt, zs = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    p = pearson_oracle(zt, zs)
    w = np.full((3, 3), 5e-3)
    np.fill_diagonal(w, 1.0)
    assert rsd_on_logits(Tensor(zt), Tensor(zs)).item() == pytest.approx(
        np.mean(w * (p - np.eye(3)) ** 2), abs=1e-12)


def test_rsd_config_validation():
    with pytest.raises(ConfigError):
        RsdConfig(kappa=-1.0)
    with pytest.raises(ConfigError):
        RsdConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        RsdConfig(lam=float("nan"))
