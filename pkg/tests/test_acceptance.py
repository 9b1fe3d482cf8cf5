"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``)
to see the report lines; the toy-scale criteria train a teacher plus five
student arms over five seeds and take a few minutes.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from rsdistill.analysis import ablation_report, cka_grid, gram_cka, linear_cka
from rsdistill.data import synth_gaussian_task
from rsdistill.gradcheck import run_suite
from rsdistill.models import ModelSpec, build
from rsdistill.rsd import (RsdConfig, aad_param_count, pearson_matrix, rsd_loss,
                           standardize_columns)
from rsdistill.tensor import Tensor
from rsdistill.trainer import default_config, distill, train_teacher

SEEDS = range(5)
STUDENT_EPOCHS = 20


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}")
        return ok
    return emit


def pearson_oracle(zt, zs):
    """Textbook Pearson correlation, one pair of columns at a time."""
    b, d = zt.shape
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            mt, ms = zt[:, i].mean(), zs[:, j].mean()
            num = sum((zt[k, i] - mt) * (zs[k, j] - ms) for k in range(b))
            vt = sum((zt[k, i] - mt) ** 2 for k in range(b))
            vs = sum((zs[k, j] - ms) ** 2 for k in range(b))
            out[i, j] = num / np.sqrt(vt * vs)
    return out


def instances(n=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        b, d = int(rng.integers(2, 17)), int(rng.integers(1, 9))
        yield rng.normal(size=(b, d)), rng.normal(size=(b, d))


# -- 1 ----------------------------------------------------------------------

def test_c01_gradient_suite(report):
    rep = run_suite(seeds=SEEDS)
    worst = max(rep.errors, key=rep.errors.get)
    ok = rep.passed and rep.seconds < 60 and "full_objective" in rep.errors
    assert report(1, ok, f"{len(rep.errors)} ops x 5 seeds, worst {worst} "
                         f"{rep.errors[worst]:.2e} < 1e-4, {rep.seconds:.1f}s < 60s")


# -- 2, 3 -------------------------------------------------------------------

def test_c02_pearson_matches_double_sum(report):
    err, lo, hi = 0.0, np.inf, -np.inf
    for zt, zs in instances():
        p = pearson_matrix(Tensor(zt), Tensor(zs)).p.data
        err = max(err, np.abs(p - pearson_oracle(zt, zs)).max())
        lo, hi = min(lo, p.min()), max(hi, p.max())
    ok = err < 1e-12 and lo >= -1 - 1e-9 and hi <= 1 + 1e-9
    assert report(2, ok, f"max |P - oracle| {err:.2e} < 1e-12, range [{lo:.6f}, {hi:.6f}]")


def test_c03_standardize_then_matmul(report):
    err = 0.0
    for zt, zs in instances(seed=1):
        p = standardize_columns(Tensor(zt)).data.T @ standardize_columns(Tensor(zs)).data
        err = max(err, np.abs(p - pearson_oracle(zt, zs)).max())
    assert report(3, err < 1e-12, f"max |std(zt)^T std(zs) - oracle| {err:.2e} < 1e-12")


# -- 4 ----------------------------------------------------------------------

def test_c04_loss_identities(report):
    rng = np.random.default_rng(4)
    d = 6
    eye = np.eye(d)
    zero = max(rsd_loss(eye, k).item() for k in (0.0, 5e-3, 1.0))
    p = rng.uniform(-1, 1, size=(d, d))
    mse_gap = abs(rsd_loss(p, 1.0).item() - np.mean((p - eye) ** 2))
    q = p.copy()
    q[~np.eye(d, dtype=bool)] += rng.normal(size=d * d - d)
    k0_same = rsd_loss(p, 0.0).item() == rsd_loss(q, 0.0).item()
    ok = zero == 0.0 and mse_gap < 1e-12 and k0_same
    assert report(4, ok, f"loss(I)={zero}, |kappa=1 - MSE| {mse_gap:.1e}, "
                         f"kappa=0 off-diagonal blind: {k0_same}")


# -- 5 ----------------------------------------------------------------------

def test_c05_invariances(report):
    rng = np.random.default_rng(5)
    affine = perm = 0.0
    flip_exact = True
    for _ in range(50):
        b, d = int(rng.integers(3, 17)), int(rng.integers(1, 9))
        zt, zs = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        p = pearson_matrix(Tensor(zt), Tensor(zs)).p.data
        a, c = rng.uniform(0.1, 10, size=d), rng.normal(size=d) * 5
        affine = max(affine,
                     np.abs(pearson_matrix(Tensor(zt * a + c), Tensor(zs)).p.data - p).max(),
                     np.abs(pearson_matrix(Tensor(zt), Tensor(zs * a + c)).p.data - p).max())
        idx = rng.permutation(b)
        perm = max(perm, np.abs(pearson_matrix(Tensor(zt[idx]), Tensor(zs[idx])).p.data - p).max())
        col = int(rng.integers(d))
        flipped = zt.copy()
        flipped[:, col] *= -1
        pf = pearson_matrix(Tensor(flipped), Tensor(zs)).p.data
        expect = p.copy()
        expect[col] *= -1
        flip_exact &= bool(np.array_equal(pf, expect))
    ok = affine <= 1e-9 and perm <= 1e-9 and flip_exact
    assert report(5, ok, f"affine {affine:.1e}, row permutation {perm:.1e} (<= 1e-9), "
                         f"sign flip exact: {flip_exact}")


# -- toy-scale runs shared by 6-9 -------------------------------------------

ARMS = {
    "scratch": dict(objective="ce"),
    "corr": dict(objective="rsd", rsd=RsdConfig(kappa=0.0)),
    "decorr": dict(objective="rsd", rsd=RsdConfig(kappa=5e-3)),
    "no_aad": dict(objective="rsd", rsd=RsdConfig(use_aad=False)),
    "logits": dict(objective="rsd_logits", rsd=RsdConfig(use_aad=False)),
}


@pytest.fixture(scope="module")
def toy():
    t0 = time.perf_counter()
    data = synth_gaussian_task(200, 3, 16, seed=7, noise=0.9)
    teacher, _ = train_teacher(ModelSpec("cnn", seed=0), data, default_config("cnn", epochs=40))
    runs = {}
    for arm, kw in ARMS.items():
        base = default_config("mixer", epochs=STUDENT_EPOCHS, **kw)
        runs[arm] = [distill(teacher, ModelSpec("mixer", seed=s), data, replace(base, seed=s))
                      for s in SEEDS]
    seconds = {"total": time.perf_counter() - t0}
    return data, teacher, runs, seconds


def median_acc(runs, arm):
    return float(np.median([rec.final["final_test_acc"] for _, rec in runs[arm]]))


@pytest.mark.slow
def test_c06_toy_directionality(report, toy):
    _, _, runs, seconds = toy
    m = {arm: median_acc(runs, arm) for arm in ("scratch", "corr", "decorr")}
    gain = m["decorr"] - m["scratch"]
    ok = m["scratch"] < m["corr"] <= m["decorr"] and gain >= 0.01 and seconds["total"] < 600
    assert report(6, ok, f"medians scratch {m['scratch']:.4f} < corr {m['corr']:.4f} <= "
                         f"decorr {m['decorr']:.4f}, gain {100 * gain:+.2f} pts >= +1.0, "
                         f"all toy runs {seconds['total']:.0f}s < 600s")


@pytest.mark.slow
def test_c07_aad_ablation_arms(report, toy):
    _, teacher, runs, _ = toy
    equal = teacher.spec.embed_dim == ModelSpec("mixer").embed_dim
    records = [rec for arm in ("decorr", "no_aad") for _, rec in runs[arm]]
    rows = [r for r in ablation_report(records) if r["table"] == "aad"]
    arms = {r["arm"]: r for r in rows}
    ok = equal and set(arms) == {"rsd", "no_aad"} and all(r["n"] == 5 for r in rows)
    assert report(7, ok, "side by side: " + ", ".join(
        f"{a} n={r['n']} median {r['median']:.4f}" for a, r in arms.items()))


@pytest.mark.slow
def test_c08_logit_variant(report, toy):
    _, _, runs, _ = toy
    overhead = {rec.final["param_overhead_count"] for _, rec in runs["logits"]}
    s, lg = median_acc(runs, "scratch"), median_acc(runs, "logits")
    ok = lg > s and overhead == {0}
    assert report(8, ok, f"rsd_logits median {lg:.4f} > scratch {s:.4f}, no decoupler")


@pytest.mark.slow
def test_c09_cka(report, toy):
    data, teacher, runs, _ = toy
    rng = np.random.default_rng(9)
    self_err = sym_err = oracle_err = 0.0
    for _ in range(20):
        n, d1, d2 = int(rng.integers(4, 40)), int(rng.integers(1, 10)), int(rng.integers(1, 10))
        x, y = rng.normal(size=(n, d1)), rng.normal(size=(n, d2))
        self_err = max(self_err, abs(linear_cka(x, x) - 1))
        sym_err = max(sym_err, abs(linear_cka(x, y) - linear_cka(y, x)))
        oracle_err = max(oracle_err, abs(linear_cka(x, y) - gram_cka(x, y)))

    def pen(arm):
        return float(np.median([cka_grid(teacher, m, data[1], ["penultimate"]).values[0, 0]
                                for m, _ in runs[arm]]))
    scratch, distilled = pen("scratch"), pen("decorr")
    ok = self_err < 1e-6 and sym_err < 1e-12 and oracle_err < 1e-10 and distilled > scratch
    assert report(9, ok, f"self {self_err:.1e}, symmetry {sym_err:.1e}, gram {oracle_err:.1e}; "
                         f"penultimate CKA distilled {distilled:.4f} > scratch {scratch:.4f}")


# -- 10 ---------------------------------------------------------------------

def test_c10_overhead_accounting(report):
    rng = np.random.default_rng(10)
    data = synth_gaussian_task(20, 3, 8, seed=1)
    mismatches = []
    for _ in range(10):
        d_s, d_e, d_t = (int(v) for v in rng.integers(2, 40, size=3))
        teacher = build(ModelSpec("cnn", embed_dim=d_t, image_size=8))
        teacher.eval()
        cfg = default_config("mixer", objective="rsd", epochs=1, batch_size=8,
                             rsd=RsdConfig(expansion_factor=d_e / d_s))
        _, rec = distill(teacher, ModelSpec("mixer", embed_dim=d_s, image_size=8), data, cfg)
        got, want = rec.final["param_overhead_count"], aad_param_count(d_s, d_e, d_t)
        if got != want:
            mismatches.append((d_s, d_e, d_t, got, want))
    assert report(10, not mismatches, f"10 random (D_s, D_e, D_t) triples, "
                                      f"mismatches {mismatches or 'none'}")


# -- 11 ---------------------------------------------------------------------

def test_c11_determinism(report, tmp_path):
    data = synth_gaussian_task(20, 3, 8, seed=1)
    spec = ModelSpec("cnn", image_size=8)
    t1, _ = train_teacher(spec, data, default_config("cnn", epochs=2), tmp_path / "t1")
    train_teacher(spec, data, default_config("cnn", epochs=2), tmp_path / "t2")
    cfg = default_config("mixer", objective="rsd", epochs=2, batch_size=8, seed=3)
    for name in ("s1", "s2"):
        distill(t1, ModelSpec("mixer", image_size=8, seed=3), data, cfg, tmp_path / name)
    same_t = (tmp_path / "t1/metrics.jsonl").read_bytes() == \
        (tmp_path / "t2/metrics.jsonl").read_bytes()
    same_s = (tmp_path / "s1/metrics.jsonl").read_bytes() == \
        (tmp_path / "s2/metrics.jsonl").read_bytes()
    assert report(11, same_t and same_s,
                  f"metrics.jsonl byte-identical: teacher {same_t}, student {same_s}")


if __name__ == "__main__":
    pytest.main([__file__, "-s", "-q"])
