import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hteml.dataset import (DataError, Dataset, expand_interactions, generate_dgp, load_csv,
                           make_split_plan, redraw_repetition, standardize)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# load_csv
# ---------------------------------------------------------------------------

def test_load_csv_basic(tmp_path):
    f = write(tmp_path / "a.csv", "y,d,x1\n1,0,0.5\n2,1,1.5\n3,0,2.5\n")
    ds = load_csv(f, {"y": "y", "d": "d", "x": ["x1"]})
    assert ds.n == 3 and ds.p == 1
    np.testing.assert_array_equal(ds.y, [1, 2, 3])
    np.testing.assert_array_equal(ds.x[:, 0], [0.5, 1.5, 2.5])
    assert ds.dropped_rows == 0


def test_load_csv_drops_missing(tmp_path):
    f = write(tmp_path / "a.csv", "y,d,x1,extra\n1,0,0.5,\n,1,1.5,3\n3,0,2.5,4\n")
    ds = load_csv(f, {"y": "y", "d": "d", "x": ["x1"]})
    assert ds.n == 2
    assert ds.dropped_rows == 1
    np.testing.assert_array_equal(ds.y, [1, 3])


def test_load_csv_unknown_column(tmp_path):
    f = write(tmp_path / "a.csv", "y,d,x1\n1,0,0.5\n")
    with pytest.raises(DataError, match="unknown column"):
        load_csv(f, {"y": "y", "d": "d", "x": ["w"]})


def test_load_csv_errors(tmp_path):
    with pytest.raises(DataError, match="missing file"):
        load_csv(tmp_path / "nope.csv", {"y": "y", "d": "d"})
    f = write(tmp_path / "b.csv", "y,d,x1\n1,0,abc\n")
    with pytest.raises(DataError, match="non-numeric"):
        load_csv(f, {"y": "y", "d": "d", "x": ["x1"]})
    f = write(tmp_path / "c.csv", "y,d,y\n1,0,1\n")
    with pytest.raises(DataError, match="duplicate"):
        load_csv(f, {"y": "y", "d": "d"})


def test_load_csv_roles(tmp_path):
    f = write(tmp_path / "a.csv", "y,d,x1,z,g,b\n1,0,0.5,1,7,1\n2,1,1.5,0,7,2\n3,0,2.5,1,8,2\n")
    ds = load_csv(f, {"y": "y", "d": "d", "x": ["x1"], "instrument": ["z"],
                      "cluster": "g", "block": "b"})
    np.testing.assert_array_equal(ds.cluster_id, [7, 7, 8])
    np.testing.assert_array_equal(ds.block_id, [1, 2, 2])
    np.testing.assert_array_equal(ds.column("z"), [1, 0, 1])
    assert ds.column_names == ["y", "d", "x1", "z"]


def test_dataset_invariants():
    with pytest.raises(DataError, match="length"):
        Dataset(y=np.zeros(3), d=np.zeros(2), x=np.zeros((3, 1)))
    with pytest.raises(DataError, match="non-finite"):
        Dataset(y=[0.0, np.nan], d=[0, 1], x=np.zeros((2, 1)))
    with pytest.raises(DataError, match="duplicate"):
        Dataset(y=[0.0, 1.0], d=[0, 1], x=np.zeros((2, 1)), x_names=("y",))
    ds = Dataset(y=[0.0, 1.0], d=[0, 0.5], x=np.zeros((2, 1)))
    with pytest.raises(DataError, match="binary"):
        ds.require_binary_treatment()


def test_dataset_is_immutable():
    ds = Dataset(y=[0.0, 1.0], d=[0, 1], x=np.zeros((2, 1)))
    with pytest.raises(ValueError):
        ds.y[0] = 5.0


def test_fingerprint_tracks_values():
    a = Dataset(y=[0.0, 1.0], d=[0, 1], x=np.zeros((2, 1)))
    b = Dataset(y=[0.0, 1.0], d=[0, 1], x=np.zeros((2, 1)))
    c = Dataset(y=[0.0, 2.0], d=[0, 1], x=np.zeros((2, 1)))
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


# ---------------------------------------------------------------------------
# expand_interactions / standardize
# ---------------------------------------------------------------------------

def test_expand_interactions_examples():
    x = np.array([[1.0], [2.0]])
    out, names = expand_interactions(x)
    np.testing.assert_array_equal(out, x)
    assert names == ["x1"]
    out, _ = expand_interactions(np.zeros((4, 3)))
    assert out.shape[1] == 6
    out, names = expand_interactions(np.array([[1.0, 2.0], [3.0, 4.0]]), ["a", "b"])
    np.testing.assert_array_equal(out[:, 2], [2.0, 12.0])
    assert names == ["a", "b", "a:b"]


def test_expand_interactions_squares():
    out, names = expand_interactions(np.array([[2.0, 3.0]]), ["a", "b"], squares=True)
    assert names == ["a", "b", "a:b", "a:a", "b:b"]
    np.testing.assert_array_equal(out[0], [2, 3, 6, 4, 9])


def test_expand_interactions_width_guard():
    with pytest.raises(DataError, match="exceeds"):
        expand_interactions(np.zeros((1, 1500)))


@given(st.integers(1, 50))
@settings(max_examples=25, deadline=None)
def test_expand_interactions_width_formula(p):
    out, names = expand_interactions(np.ones((2, p)))
    assert out.shape[1] == p + p * (p - 1) // 2 == len(names)


def test_standardize_examples():
    s = standardize(np.array([1.0, 2.0, 3.0]))
    assert abs(s.values.mean()) < 1e-15
    assert abs(s.values.std(ddof=1) - 1.0) < 1e-15
    s = standardize(np.array([[5.0], [5.0], [5.0]]))
    np.testing.assert_array_equal(s.values[:, 0], 0.0)
    assert s.constant[0] and s.scales[0] == 1.0


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_standardize_round_trip(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20, 4)) * rng.uniform(0.1, 100, 4) + rng.normal(0, 50, 4)
    x[:, 3] = 7.0
    s = standardize(x)
    np.testing.assert_allclose(s.centers + s.scales * s.values, x, rtol=0, atol=1e-12 * 100)
    assert list(s.constant) == [False, False, False, True]


# ---------------------------------------------------------------------------
# make_split_plan
# ---------------------------------------------------------------------------

def test_split_plan_sizes():
    plan = make_split_plan(10, 2, 1, seed=1)
    assert sorted(np.bincount(plan.assignment[0])) == [5, 5]
    plan = make_split_plan(7, 2, 1, seed=1)
    assert sorted(np.bincount(plan.assignment[0])) == [3, 4]


def test_split_plan_deterministic():
    a = make_split_plan(50, 3, 4, seed=9)
    b = make_split_plan(50, 3, 4, seed=9)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    assert not np.array_equal(a.assignment, make_split_plan(50, 3, 4, seed=10).assignment)


def test_split_plan_errors():
    with pytest.raises(ValueError):
        make_split_plan(3, 4)
    with pytest.raises(ValueError):
        make_split_plan(3, 1)
    with pytest.raises(ValueError):
        make_split_plan(3, 2, 0)


@given(st.integers(2, 200), st.integers(2, 10), st.integers(1, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_split_plan_partition(n, k, s, seed):
    k = min(k, n)
    plan = make_split_plan(n, k, s, seed)
    for rep in range(s):
        counts = np.bincount(plan.assignment[rep], minlength=k)
        assert counts.sum() == n and counts.max() - counts.min() <= 1
        covered = np.concatenate([te for _, te in plan.folds(rep)])
        np.testing.assert_array_equal(np.sort(covered), np.arange(n))
        for tr, te in plan.folds(rep):
            assert not set(tr) & set(te)


def test_redraw_is_balanced_and_different():
    plan = make_split_plan(40, 2, 1, seed=0)
    alt = redraw_repetition(plan, 0, 0)
    assert sorted(np.bincount(alt)) == [20, 20]
    assert not np.array_equal(alt, plan.assignment[0])


# ---------------------------------------------------------------------------
# generate_dgp
# ---------------------------------------------------------------------------

def test_dgp_null_and_echo():
    s = generate_dgp("hte_null", 50, 3, {"tau": 0.0}, seed=1)
    assert s.true_ate == 0.0
    np.testing.assert_array_equal(s.true_cate, 0.0)
    s = generate_dgp("plm_nonlinear", 50, 3, {"theta": 0.5}, seed=1)
    assert s.true_ate == 0.5


def test_dgp_hinge_expectation():
    s = generate_dgp("hte_forest", 100_000, 2, {"scale": 1.0}, seed=3)
    # E[max(Z, 0)] = 1/sqrt(2 pi) for standard normal Z
    mc_se = s.true_cate.std(ddof=1) / np.sqrt(len(s.true_cate))
    assert abs(s.true_cate.mean() - 1.0 / np.sqrt(2 * np.pi)) < 3 * mc_se


@pytest.mark.parametrize("name", ["plm_nonlinear", "pliv_endogenous", "hte_forest", "hte_null"])
def test_dgp_deterministic_and_consistent(name):
    a = generate_dgp(name, 80, 4, seed=5)
    b = generate_dgp(name, 80, 4, seed=5)
    assert a.dataset.fingerprint() == b.dataset.fingerprint()
    np.testing.assert_array_equal(a.true_cate, b.true_cate)
    assert abs(a.true_cate.mean() - a.true_ate) <= 1e-12
    assert a.dataset.n == 80 and a.dataset.p == 4


def test_dgp_binary_treatment_and_instrument():
    s = generate_dgp("hte_forest", 200, 3, {"effect": 1, "ate": 0.5}, seed=2)
    assert set(np.unique(s.dataset.d)) == {0.0, 1.0}
    np.testing.assert_allclose(s.true_cate, 0.5 + s.dataset.x[:, 0])
    s = generate_dgp("pliv_endogenous", 200, 3, seed=2)
    assert s.dataset.instrument.shape == (200, 1)


def test_dgp_errors():
    with pytest.raises(ValueError, match="unknown DGP"):
        generate_dgp("nope", 10, 2)
    with pytest.raises(ValueError):
        generate_dgp("plm_nonlinear", 10, 2, {"bogus": 1.0})
    with pytest.raises(ValueError):
        generate_dgp("hte_forest", 10, 2, {"propensity": 1.0})
    with pytest.raises(ValueError):
        generate_dgp("plm_nonlinear", 0, 2)
