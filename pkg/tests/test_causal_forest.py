import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hteml.causal_forest import (ForestError, ForestParams, OverlapError, TreeGrowthError,
                                 dr_scores, estimate_propensity, fit_causal_forest, forest_ate,
                                 grow_causal_tree, heterogeneity_test, ij_variance, load_forest,
                                 predict_cate, save_forest, subgroup_ate, tune_forest,
                                 variable_importance)
from hteml.causal_forest import _halves
from hteml.dataset import DataError, Dataset, generate_dgp
from oracles import brute_ij

SMALL = dict(n_trees=60, min_treated_per_leaf=3, min_control_per_leaf=3)


def step_data(n=400, seed=0, p=3):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, p))
    d = rng.integers(0, 2, n).astype(float)
    tau = np.where(x[:, 0] > 0, 2.0, 0.0)
    y = tau * d + 0.1 * rng.normal(size=n)
    return Dataset(y=y, d=d, x=x)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def honest_value(yt, yc, n_tr, n_est, p):
    tau = yt.mean() - yc.mean()
    pen = 1.0 / n_tr + 1.0 / n_est
    vt = max(np.var(yt, ddof=1), 0.0)
    vc = max(np.var(yc, ddof=1), 0.0)
    return (len(yt) + len(yc)) * tau**2 / n_tr - pen * (vt / p + vc / (1 - p))


def best_root_split(x, y, d, tr, es, min_t, min_c):
    """Exhaustive search of the honest criterion at the root; None if no split."""
    n_tr, n_est = len(tr), len(es)
    p_tr = d[tr].mean()
    t_tr = max(min_t, 2)
    c_tr = max(min_c, 2)
    is_t = d[tr] == 1
    parent = honest_value(y[tr][is_t], y[tr][~is_t], n_tr, n_est, p_tr)
    best = (1e-12 * (1 + abs(parent)), None, None)
    for j in range(x.shape[1]):
        vals = np.unique(x[np.concatenate([tr, es]), j])
        for v0, v1 in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (v0 + v1)
            gain = -parent
            ok = True
            for side in (x[:, j] <= thr, x[:, j] > thr):
                a_tr = tr[side[tr]]
                a_es = es[side[es]]
                nt_e = int(d[a_es].sum())
                nc_e = len(a_es) - nt_e
                yt, yc = y[a_tr][d[a_tr] == 1], y[a_tr][d[a_tr] == 0]
                if nt_e < min_t or nc_e < min_c or len(yt) < t_tr or len(yc) < c_tr:
                    ok = False
                    break
                gain += honest_value(yt, yc, n_tr, n_est, p_tr)
            if ok and gain > best[0]:
                best = (gain, j, thr)
    return best


def root_gain(x, y, d, tr, es, j, thr):
    is_t = d[tr] == 1
    p_tr = is_t.mean()
    total = -honest_value(y[tr][is_t], y[tr][~is_t], len(tr), len(es), p_tr)
    for side in (x[tr, j] <= thr, x[tr, j] > thr):
        rows = tr[side]
        total += honest_value(y[rows][d[rows] == 1], y[rows][d[rows] == 0], len(tr), len(es),
                              p_tr)
    return total


# ---------------------------------------------------------------------------
# infinitesimal jackknife
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ij_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    B, n, s, q = 25, 12, 5, 4
    inbag = np.zeros((B, n))
    for b in range(B):
        inbag[b, rng.choice(n, s, replace=False)] = 1
    preds = rng.normal(size=(B, q)) + inbag[:, :q] * 2.0
    for bc in (False, True):
        got, _ = ij_variance(inbag, preds, s, bias_correct=bc)
        want = brute_ij(inbag, preds, s, bias_correct=bc)
        if bc:
            want = np.maximum(want, 0.0)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_ij_admissible_subset_matches_brute_force():
    rng = np.random.default_rng(5)
    B, n, s = 30, 10, 4
    inbag = np.zeros((B, n))
    for b in range(B):
        inbag[b, rng.choice(n, s, replace=False)] = 1
    preds = rng.normal(size=(B, 2))
    adm = rng.uniform(size=(B, 2)) < 0.6
    got, _ = ij_variance(inbag, preds, s, admissible=adm, bias_correct=False)
    for j in range(2):
        want = brute_ij(inbag[adm[:, j]], preds[adm[:, j], j:j + 1], s, bias_correct=False)
        # n is the full unit count in both
        assert got[j] == pytest.approx(want[0], rel=1e-10)


def test_ij_identical_trees_have_zero_variance():
    inbag = np.zeros((4, 8))
    for b in range(4):
        inbag[b, [b, b + 4]] = 1
    var, clamped = ij_variance(inbag, np.full((4, 3), 3.0), 2)
    np.testing.assert_array_equal(var, 0.0)
    assert not clamped.any()


def test_ij_clamps_negative_corrections():
    rng = np.random.default_rng(0)
    inbag = np.zeros((50, 20))
    for b in range(50):
        inbag[b, rng.choice(20, 10, replace=False)] = 1
    # predictions independent of the subsample: the correction dominates
    var, clamped = ij_variance(inbag, rng.normal(size=(50, 30)), 10)
    assert (var >= 0).all()
    np.testing.assert_array_equal(var[clamped], 0.0)
    assert clamped.any()


# ---------------------------------------------------------------------------
# single trees
# ---------------------------------------------------------------------------

def test_tree_recovers_step_effect():
    ds = step_data()
    rows = np.arange(ds.n)
    tree = grow_causal_tree(ds.x, ds.y, ds.d, rows[::2], rows[1::2], mtry=3, seed=1)
    assert tree.feature[0] == 0
    assert abs(tree.threshold[0]) < 0.1
    pred = tree.predict(np.array([[-0.5, 0, 0], [0.5, 0, 0]]))
    assert abs(pred[0]) < 0.3 and abs(pred[1] - 2.0) < 0.3


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_root_split_matches_exhaustive_search(seed, min_leaf):
    rng = np.random.default_rng(seed)
    n, p = 60, 3
    x = rng.normal(size=(n, p))
    d = np.zeros(n)
    d[rng.permutation(n)[: n // 2]] = 1.0
    y = x[:, rng.integers(p)] * d + rng.normal(size=n)
    perm = rng.permutation(n)
    tr, es = np.sort(perm[:30]), np.sort(perm[30:])
    tree = grow_causal_tree(x, y, d, tr, es, mtry=p, min_treated=min_leaf,
                            min_control=min_leaf, seed=seed)
    gain, j, thr = best_root_split(x, y, d, tr, es, min_leaf, min_leaf)
    if j is None:
        assert tree.is_leaf[0]
    else:
        assert not tree.is_leaf[0]
        got = root_gain(x, y, d, tr, es, tree.feature[0], tree.threshold[0])
        assert got == pytest.approx(gain, rel=1e-9, abs=1e-12)
        if (tree.feature[0], tree.threshold[0]) != (j, thr):
            # only exact ties may pick a different split
            assert got == pytest.approx(gain, rel=1e-12)


def test_tree_is_honest_and_respects_leaf_minima():
    ds = step_data(seed=3)
    rows = np.random.default_rng(0).permutation(ds.n)
    tr, es = rows[:200], rows[200:]
    tree = grow_causal_tree(ds.x, ds.y, ds.d, tr, es, mtry=3, min_treated=4, min_control=6)
    assert not np.intersect1d(tree.train_rows, tree.estimate_rows).size
    leaves = tree.is_leaf & (tree.depth > 0)
    assert leaves.any()
    assert (tree.n_treated[leaves] >= 4).all() and (tree.n_control[leaves] >= 6).all()
    # leaf effects are estimation-row differences in means
    leaf_of = tree.apply(ds.x[es])
    for leaf in np.flatnonzero(tree.is_leaf):
        r = es[leaf_of == leaf]
        want = ds.y[r][ds.d[r] == 1].mean() - ds.y[r][ds.d[r] == 0].mean()
        assert tree.tau[leaf] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_constant_outcome_gives_zero_effects():
    ds = step_data(seed=4)
    rows = np.arange(ds.n)
    tree = grow_causal_tree(ds.x, np.full(ds.n, 1.5), ds.d, rows[::2], rows[1::2], mtry=3)
    np.testing.assert_array_equal(tree.tau, 0.0)


def test_huge_minimum_gives_single_leaf():
    ds = step_data(seed=5)
    rows = np.arange(ds.n)
    es = rows[1::2]
    tree = grow_causal_tree(ds.x, ds.y, ds.d, rows[::2], es, min_treated=10_000,
                            min_control=10_000)
    assert len(tree.feature) == 1 and tree.is_leaf[0]
    want = ds.y[es][ds.d[es] == 1].mean() - ds.y[es][ds.d[es] == 0].mean()
    assert tree.tau[0] == pytest.approx(want, rel=1e-12)


def test_label_swap_negates_leaf_effects():
    ds = step_data(seed=6)
    rows = np.arange(ds.n)
    tree = grow_causal_tree(ds.x, ds.y, ds.d, rows[::2], rows[1::2], mtry=3)
    a = tree.reestimate(ds.x, ds.y, ds.d)
    b = tree.reestimate(ds.x, ds.y, 1.0 - ds.d)
    leaves = tree.is_leaf
    np.testing.assert_allclose(b[leaves], -a[leaves], rtol=0, atol=1e-12)
    np.testing.assert_allclose(a[leaves], tree.tau[leaves], rtol=0, atol=1e-12)


def test_tree_errors():
    ds = step_data(n=40)
    rows = np.arange(40)
    with pytest.raises(ValueError, match="disjoint"):
        grow_causal_tree(ds.x, ds.y, ds.d, rows[:25], rows[20:])
    d = np.zeros(40)
    d[30:] = 1.0
    with pytest.raises(TreeGrowthError):
        grow_causal_tree(ds.x, ds.y, d, rows[:20], rows[20:])


# ---------------------------------------------------------------------------
# forests
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def hte():
    s = generate_dgp("hte_forest", 500, 4, {"effect": 1}, seed=11)
    model = fit_causal_forest(s.dataset, ForestParams(n_trees=200, seed=3))
    return s, model


def test_forest_honesty_and_subsamples(hte):
    _, model = hte
    for b in range(model.n_trees):
        tree = model.tree(b)
        assert not np.intersect1d(tree.train_rows, tree.estimate_rows).size
        units = np.flatnonzero(model.inbag[b])
        assert len(units) == model.subsample_units
        used = np.union1d(tree.train_rows, tree.estimate_rows)
        np.testing.assert_array_equal(np.unique(model.unit_of_row[used]), units)


def test_forest_prediction_is_mean_of_trees(hte):
    s, model = hte
    xq = s.dataset.x[:20]
    per_tree = np.array([t.predict(xq) for t in model.trees()])
    pred = predict_cate(model, xq)
    np.testing.assert_allclose(pred.tau, per_tree.mean(axis=0), rtol=0, atol=1e-14)
    assert (pred.variance >= 0).all()


def test_oob_uses_only_excluded_trees(hte):
    s, model = hte
    rows = np.arange(30)
    per_tree = np.array([t.predict(s.dataset.x[rows]) for t in model.trees()])
    pred = predict_cate(model, oob=True, rows=rows)
    for k, i in enumerate(rows):
        out = model.inbag[:, model.unit_of_row[i]] == 0
        assert pred.n_trees_used[k] == out.sum()
        assert pred.tau[k] == pytest.approx(per_tree[out, k].mean(), rel=1e-12)
    with pytest.raises(ValueError):
        predict_cate(model, s.dataset.x, oob=True)


def test_forest_tracks_true_effect(hte):
    s, model = hte
    tau = predict_cate(model, variance=False).tau
    assert np.corrcoef(tau, s.true_cate)[0, 1] > 0.7


def test_single_tree_forest_equals_tree():
    ds = step_data(seed=7)
    model = fit_causal_forest(ds, ForestParams(n_trees=1, seed=2))
    pred = predict_cate(model, variance=False)
    np.testing.assert_array_equal(pred.tau, model.tree(0).predict(ds.x))


def test_forest_deterministic_across_jobs():
    ds = step_data(seed=8)
    params = ForestParams(seed=5, **SMALL)
    base = predict_cate(fit_causal_forest(ds, params, n_jobs=1))
    for jobs in (2, 8):
        other = predict_cate(fit_causal_forest(ds, params, n_jobs=jobs))
        np.testing.assert_array_equal(base.tau, other.tau)
        np.testing.assert_array_equal(base.variance, other.variance)


def test_forest_shift_invariance():
    ds = step_data(seed=9)
    params = ForestParams(seed=1, **SMALL)
    a = predict_cate(fit_causal_forest(ds, params))
    b = predict_cate(fit_causal_forest(ds.replace(y=ds.y + 100.0), params))
    np.testing.assert_allclose(a.tau, b.tau, rtol=0, atol=1e-10)


def test_variable_importance():
    ds = step_data(seed=10)
    model = fit_causal_forest(ds, ForestParams(seed=0, mtry=3, **SMALL))
    imp = variable_importance(model)
    assert sum(v for _, v in imp) == pytest.approx(1.0)
    assert imp[0][0] == "x1"
    x = np.column_stack([ds.x[:, 0], np.ones(ds.n), np.zeros(ds.n)])
    only = fit_causal_forest(ds.replace(x=x), ForestParams(seed=0, mtry=3, **SMALL))
    assert variable_importance(only)[0] == ("x1", 1.0)
    stumps = fit_causal_forest(ds, ForestParams(n_trees=10, min_treated_per_leaf=45,
                                                min_control_per_leaf=45))
    assert variable_importance(stumps) == []


def test_save_load_round_trip(tmp_path, hte):
    s, model = hte
    path = tmp_path / "forest.npz"
    save_forest(model, path)
    loaded = load_forest(path)
    assert loaded.params == model.params and loaded.fingerprint == model.fingerprint
    a, b = predict_cate(model), predict_cate(loaded)
    np.testing.assert_array_equal(a.tau, b.tau)
    np.testing.assert_array_equal(a.variance, b.variance)
    np.savez(tmp_path / "bad.npz", header=np.array('{"format": "other"}'))
    with pytest.raises(ValueError, match="not a causal forest"):
        load_forest(tmp_path / "bad.npz")


def test_forest_errors():
    ds = step_data(n=120)
    with pytest.raises(DataError, match="binary"):
        fit_causal_forest(ds.replace(d=ds.d * 0.5), ForestParams(n_trees=5))
    with pytest.raises(DataError, match="n >= 50"):
        fit_causal_forest(step_data(n=40), ForestParams(n_trees=5))
    with pytest.raises(DataError, match="cluster"):
        fit_causal_forest(ds, ForestParams(n_trees=5, cluster_mode=True))
    few = ds.replace(cluster_id=np.arange(ds.n) % 5)
    with pytest.raises(DataError, match="clusters"):
        fit_causal_forest(few, ForestParams(n_trees=5, cluster_mode=True))
    with pytest.raises(ValueError, match="subsample_fraction"):
        fit_causal_forest(ds, ForestParams(n_trees=5, subsample_fraction=0.1,
                                           min_treated_per_leaf=20, min_control_per_leaf=20))
    with pytest.raises(ValueError):
        ForestParams(n_trees=0)
    with pytest.raises(ValueError):
        fit_causal_forest(ds, ForestParams(n_trees=5, mtry=9))


def test_cluster_mode_samples_whole_clusters():
    s = generate_dgp("hte_forest", 300, 3, {"effect": 1}, seed=12)
    ds = s.dataset.replace(cluster_id=np.arange(300) // 10)
    model = fit_causal_forest(ds, ForestParams(cluster_mode=True, seed=0, **SMALL))
    assert model.inbag.shape == (model.n_trees, 30)
    for tree in model.trees():
        used = np.union1d(tree.train_rows, tree.estimate_rows)
        clusters = np.unique(ds.cluster_id[used])
        # every row of a sampled cluster is used
        assert len(used) == 10 * len(clusters)
        tr_c = set(ds.cluster_id[tree.train_rows])
        assert not tr_c & set(ds.cluster_id[tree.estimate_rows])
    pred = predict_cate(model, oob=True, variance=False)
    assert pred.valid.all()


# ---------------------------------------------------------------------------
# scores and average effects
# ---------------------------------------------------------------------------

def test_propensity_modes():
    ds = step_data(n=200, seed=13)
    np.testing.assert_array_equal(estimate_propensity(ds, 0.3), 0.3)
    np.testing.assert_array_equal(estimate_propensity(ds, "constant"), ds.d.mean())
    blocks = np.arange(200) % 2
    e = estimate_propensity(ds.replace(block_id=blocks), "block")
    for b in (0, 1):
        np.testing.assert_allclose(e[blocks == b], ds.d[blocks == b].mean())
    f = estimate_propensity(ds, "forest", n_trees=50)
    assert ((f > 0) & (f < 1)).all()
    with pytest.raises(ValueError):
        estimate_propensity(ds, 1.5)
    with pytest.raises(DataError):
        estimate_propensity(ds, "block")
    with pytest.raises(ValueError, match="unknown"):
        estimate_propensity(ds, "magic")


def test_dr_scores_formula_and_ate(hte):
    s, model = hte
    sc = dr_scores(model, s.dataset, propensity=0.5, nuisance_trees=100)
    w, y = s.dataset.d, s.dataset.y
    want = sc.tau_oob + (w - 0.5) / 0.25 * (y - sc.m_hat - (w - 0.5) * sc.tau_oob)
    np.testing.assert_allclose(sc.scores, want, rtol=1e-12)
    ate = forest_ate(model, s.dataset, scores=sc)
    assert ate.theta == pytest.approx(sc.scores.mean())
    assert ate.se == pytest.approx(sc.scores.std(ddof=1) / np.sqrt(s.dataset.n))
    assert abs(ate.theta - s.true_ate) < 3 * ate.se


def test_heterogeneity_and_subgroups(hte):
    s, model = hte
    sc = dr_scores(model, s.dataset, propensity=0.5, nuisance_trees=100)
    het = heterogeneity_test(model, s.dataset, propensity=0.5, nuisance_trees=100)
    assert het.difference == pytest.approx(het.ate_above.theta - het.ate_below.theta)
    assert het.diff_ci[0] > 0
    assert len(het.median_cate) == 2 and not het.degenerate_grouping
    sub = subgroup_ate(model, s.dataset, "x1", scores=sc)
    assert sub.above.theta > sub.below.theta and sub.p_diff < 0.05
    with pytest.raises(ForestError, match="empty"):
        subgroup_ate(model, s.dataset, "x1", threshold=100.0, scores=sc)


def test_heterogeneity_grouping_ignores_own_half_outcomes():
    s = generate_dgp("hte_forest", 300, 3, {"effect": 1}, seed=21)
    ds = s.dataset
    params = ForestParams(n_trees=50, seed=4)
    model = fit_causal_forest(ds, params)
    seed = int(np.random.SeedSequence([params.seed, 13]).generate_state(1)[0])
    first = _halves(model, ds, seed)
    noisy = ds.replace(y=np.where(first, ds.y + 10.0 * ds.x[:, 1], ds.y))
    # same arm labels and seed, so the halves coincide
    np.testing.assert_array_equal(first, _halves(fit_causal_forest(noisy, params), noisy, seed))
    a = heterogeneity_test(model, ds, propensity=0.5, nuisance_trees=50)
    b = heterogeneity_test(fit_causal_forest(noisy, params), noisy, propensity=0.5,
                           nuisance_trees=50)
    # the first half is ranked by a forest grown on the untouched second half
    assert a.median_cate[0] == b.median_cate[0]
    assert a.median_cate[1] != b.median_cate[1]


def test_heterogeneity_errors():
    ds = step_data(n=60)
    model = fit_causal_forest(ds, ForestParams(n_trees=20, min_treated_per_leaf=3,
                                               min_control_per_leaf=3))
    with pytest.raises(ForestError, match="half-sample"):
        heterogeneity_test(model, ds, propensity=0.5)


def test_dr_scores_errors(hte):
    s, model = hte
    other = generate_dgp("hte_forest", 500, 4, seed=99).dataset
    with pytest.raises(DataError, match="match"):
        dr_scores(model, other)
    with pytest.raises(OverlapError):
        dr_scores(model, s.dataset, propensity=0.005, nuisance_trees=50)


def test_dr_scores_need_oob_trees():
    ds = step_data(n=100)
    model = fit_causal_forest(ds, ForestParams(n_trees=3, **{k: v for k, v in SMALL.items()
                                                             if k != "n_trees"}))
    with pytest.raises(ForestError, match="out-of-bag"):
        dr_scores(model, ds)


def test_tune_forest_returns_admissible_draw():
    s = generate_dgp("hte_forest", 200, 4, {"effect": 1}, seed=14)
    base = ForestParams(n_trees=77, seed=9)
    res = tune_forest(s.dataset, base, n_draws=4, n_trees=20, seed=0)
    assert len(res.draws) == len(res.losses) >= 1
    best = res.draws[int(np.argmin(res.losses))]
    assert res.best.n_trees == 77 and res.best.seed == 9
    assert res.best.mtry == best.mtry and 0.2 <= res.best.subsample_fraction <= 0.5
    assert 1 <= res.best.min_treated_per_leaf <= 20
