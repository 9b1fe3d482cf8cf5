import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from rsdistill.analysis import (CkaGrid, ablation_report, capture, cka_grid, gram_cka,
                                linear_cka, linear_cka_full, load_records, report_csv)
from rsdistill.data import synth_gaussian_task
from rsdistill.errors import ConfigError
from rsdistill.models import ModelSpec, build
from rsdistill.trainer import RunRecord

shapes = st.tuples(st.integers(4, 20), st.integers(1, 6), st.integers(1, 6))


def test_self_similarity():
    x = np.random.default_rng(0).normal(size=(30, 5))
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("c", [1e-6, -3.0, 250.0])
def test_scale_invariance(c):
    x = np.random.default_rng(1).normal(size=(20, 4))
    assert linear_cka(x, c * x) == pytest.approx(1.0, abs=1e-9)


def test_gram_oracle_10x3_vs_10x5():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 5))
    assert abs(linear_cka(x, y) - gram_cka(x, y)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(shapes, st.integers(0, 2 ** 31))
def test_symmetry_bounds_and_oracle(shape, seed):
    n, d1, d2 = shape
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, d1)), rng.normal(size=(n, d2))
    a, b = linear_cka(x, y), linear_cka(y, x)
    assert abs(a - b) < 1e-12
    assert -1e-9 <= a <= 1 + 1e-9
    assert abs(a - gram_cka(x, y)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(shapes, st.integers(0, 2 ** 31))
def test_orthogonal_invariance(shape, seed):
    n, d1, d2 = shape
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, d1)), rng.normal(size=(n, d2))
    q = ortho_group.rvs(d1, random_state=seed) if d1 > 1 else np.array([[-1.0]])
    assert abs(linear_cka(x @ q, y) - linear_cka(x, y)) < 1e-9


def test_zero_variance_is_flagged_zero():
    x = np.random.default_rng(3).normal(size=(8, 2))
    res = linear_cka_full(np.full((8, 3), 4.2), x)
    assert res.degenerate and res.value == 0.0
    assert not linear_cka_full(x, x).degenerate


def test_rejects_mismatched_examples():
    with pytest.raises(ValueError):
        linear_cka(np.ones((4, 2)), np.ones((5, 2)))


# -- grids ------------------------------------------------------------------

@pytest.fixture(scope="module")
def probe():
    return synth_gaussian_task(10, 3, 16, seed=3)[1]


def test_teacher_vs_itself_has_unit_diagonal(probe):
    t = build(ModelSpec("cnn"))
    g = cka_grid(t, t, probe)
    assert g.rows == g.cols == t.tap_names
    np.testing.assert_allclose(np.diag(g.values), 1.0, atol=1e-6)
    assert np.all(g.values >= -1e-9) and np.all(g.values <= 1 + 1e-9)


def test_grid_shape_across_families(probe):
    g = cka_grid(build(ModelSpec("cnn")), build(ModelSpec("mixer")), probe)
    assert g.values.shape == (4, 3)


def test_zero_student_gives_degenerate_zeros(probe):
    s = build(ModelSpec("mixer"))
    for p in s.parameters():
        p.data = np.zeros_like(p.data)
    g = cka_grid(build(ModelSpec("cnn")), s, probe)
    assert g.degenerate.all()
    np.testing.assert_array_equal(g.values, 0.0)


def test_probe_row_shuffle_invariance(probe):
    from rsdistill.data import Dataset
    t, s = build(ModelSpec("cnn")), build(ModelSpec("transformer"))
    perm = np.random.default_rng(4).permutation(len(probe))
    shuffled = Dataset(probe.images[perm], probe.labels[perm], probe.num_classes, "test")
    a, b = cka_grid(t, s, probe), cka_grid(t, s, shuffled)
    np.testing.assert_allclose(a.values, b.values, atol=1e-9)


def test_unknown_tap_lists_available(probe):
    t = build(ModelSpec("cnn"))
    with pytest.raises(ConfigError, match="available.*block1"):
        capture(t, probe, ["block9"])


def test_grid_csv_roundtrip_and_pgm(tmp_path):
    rng = np.random.default_rng(5)
    g = CkaGrid(["a", "b"], ["x", "y", "z"], rng.uniform(size=(2, 3)))
    back = CkaGrid.from_csv(g.to_csv())
    assert back.rows == g.rows and back.cols == g.cols
    np.testing.assert_array_equal(back.values, g.values)
    g.save(tmp_path / "g.csv", tmp_path / "g.pgm")
    raw = (tmp_path / "g.pgm").read_bytes()
    assert raw.startswith(b"P5\n24 16\n255\n")
    assert len(raw) == len(b"P5\n24 16\n255\n") + 24 * 16


# -- ablation report --------------------------------------------------------

def rec(objective="rsd", lam=2.0, kappa=5e-3, use_aad=True, acc=0.5, arm=None, error=None):
    cfg = {"train": {"objective": objective,
                     "rsd": {"lam": lam, "kappa": kappa, "use_aad": use_aad}}}
    return RunRecord(cfg, [], {"final_test_acc": acc}, arm=arm, error=error)


def test_baseline_only_is_one_row_plus_gaps():
    rows = ablation_report([rec("ce", acc=0.7)], include_missing=False)
    assert rows == [{"table": "rsd", "arm": "baseline", "n": 1, "median": 0.7, "min": 0.7,
                     "max": 0.7}]
    full = ablation_report([rec("ce", acc=0.7)])
    assert [(r["arm"], r["n"]) for r in full] == [("baseline", 1), ("corr", 0), ("decorr", 0)]
    assert full[1]["median"] is None


def test_medians_by_hand():
    records = ([rec("ce", acc=a) for a in (0.1, 0.5, 0.3)] +
               [rec(kappa=0.0, acc=a) for a in (0.6, 0.2)] +
               [rec(acc=a) for a in (0.9, 0.7, 0.8, 0.4, 1.0)] +
               [rec(use_aad=False, acc=0.55)] +
               [rec(acc=0.0, error="boom")])
    rows = {(r["table"], r["arm"]): r for r in ablation_report(records)}
    assert rows[("rsd", "baseline")]["median"] == 0.3
    assert rows[("rsd", "corr")]["median"] == pytest.approx(0.4)
    assert rows[("rsd", "decorr")]["n"] == 6
    assert rows[("rsd", "decorr")]["median"] == pytest.approx((0.7 + 0.8) / 2)
    assert rows[("aad", "no_aad")]["median"] == 0.55
    assert rows[("aad", "rsd")]["n"] == 7
    assert rows[("aad", "rsd")]["min"] == 0.2


def test_explicit_arm_tag_wins():
    rows = ablation_report([rec(acc=0.4, arm="baseline")], include_missing=False)
    assert rows[0]["arm"] == "baseline"


def test_report_csv_and_loading(tmp_path):
    import json
    for i, r in enumerate([rec("ce", acc=0.25), rec(acc=0.75, arm="decorr")]):
        d = tmp_path / f"run{i}"
        d.mkdir()
        (d / "summary.json").write_text(json.dumps(r.to_dict()))
    loaded = load_records(tmp_path)
    assert [r.arm for r in loaded] == [None, "decorr"]
    text = report_csv(ablation_report(loaded))
    assert text.splitlines()[0] == "table,arm,n,median,min,max"
    assert "rsd,corr,0,,," in text
    assert "rsd,decorr,1,0.75,0.75,0.75" in text
