import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hteml.learners as learners
from hteml.learners import (ConstantPredictor, LearnerError, LearnerSpec, RankDeficiencyError,
                            evaluate_oos, fit_boosting, fit_forest, fit_hybrid, fit_lasso,
                            fit_learner, fit_neural_net, fit_tree, lambda_max, lasso_path,
                            simplex_weights, weighted_ols)
from hteml.learners._kernels import LEAF
from hteml.learners.neural_net import loss_and_grad, n_params

FAST = {
    "lasso": {"n_lambdas": 20},
    "tree": {},
    "forest": {"n_trees": 20},
    "boosting": {"n_trees": 30, "depth": 2},
    "neural_net": {"max_iter": 50},
    "ensemble": {"members": ("lasso", "tree")},
    "best": {"members": ("lasso", "tree")},
}


def linear_data(n=200, p=5, seed=0, noise=1.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    y = 2.0 * x[:, 0] - x[:, 1] + noise * rng.normal(size=n)
    return x, y


# ---------------------------------------------------------------------------
# LearnerSpec validation
# ---------------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError, match="unknown learner"):
        LearnerSpec("svm")
    with pytest.raises(ValueError, match="unknown hyperparameters"):
        LearnerSpec("lasso", {"depth": 3})
    with pytest.raises(ValueError):
        LearnerSpec("forest", {"n_trees": 0})
    with pytest.raises(ValueError):
        LearnerSpec("neural_net", {"decay": -1.0})
    with pytest.raises(ValueError):
        LearnerSpec("lasso", cv_folds=1)
    spec = LearnerSpec("forest", {"n_trees": 5}, seed=3)
    assert spec.params["min_leaf"] == 5
    assert spec.with_seed(9).seed == 9 and spec.with_seed(9).params["n_trees"] == 5


@pytest.mark.parametrize("method", list(FAST))
def test_constant_target(method):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    pred = fit_learner(LearnerSpec(method, FAST[method]), x, np.full(40, 2.5))
    np.testing.assert_array_equal(pred.predict(rng.normal(size=(7, 3))), 2.5)


@pytest.mark.parametrize("method", list(FAST))
def test_learners_fit_signal(method):
    x, y = linear_data(300, 4, seed=1, noise=0.3)
    pred = fit_learner(LearnerSpec(method, FAST[method], seed=2), x, y)
    xt, yt = linear_data(300, 4, seed=2, noise=0.0)
    assert evaluate_oos(pred, xt, yt) < np.var(yt)
    with pytest.raises(ValueError, match="columns"):
        pred.predict(np.zeros((2, 3)))


def test_fit_learner_rejects_bad_targets():
    with pytest.raises(LearnerError, match="non-finite"):
        fit_learner(LearnerSpec("lasso"), np.zeros((30, 1)), np.r_[np.nan, np.ones(29)])


# ---------------------------------------------------------------------------
# evaluate_oos
# ---------------------------------------------------------------------------

def test_evaluate_oos():
    x = np.zeros((4, 2))
    y = np.array([1.0, 2.0, 3.0, 6.0])
    assert evaluate_oos(ConstantPredictor(0.0, 2), x, np.zeros(4)) == 0.0
    assert evaluate_oos(ConstantPredictor(2.0, 2), x, y) == pytest.approx(np.mean((y - 2.0) ** 2))
    # residuals (1, 0, 1, 4) vs (0, 1, 2, 5)
    a = evaluate_oos(ConstantPredictor(2.0, 2), x, y)
    b = evaluate_oos(ConstantPredictor(1.0, 2), x, y)
    assert a == 18 / 4 and b == 30 / 4 and a < b
    with pytest.raises(ValueError, match="width"):
        evaluate_oos(ConstantPredictor(0.0, 3), x, y)
    with pytest.raises(ValueError, match="empty"):
        evaluate_oos(ConstantPredictor(0.0, 2), np.zeros((0, 2)), [])


# ---------------------------------------------------------------------------
# lasso
# ---------------------------------------------------------------------------

def _unit_column(rng, n):
    x = rng.normal(size=n)
    x -= x.mean()
    return x / np.sqrt(np.mean(x**2))


def test_lasso_soft_threshold_closed_form():
    rng = np.random.default_rng(42)
    n = 50
    worst = 0.0
    for _ in range(100):
        x = _unit_column(rng, n)
        b = rng.uniform(-2, 2)
        y = b * x + rng.normal(size=n)
        y -= y.mean()
        b_ols = float(x @ y / n)
        lam = rng.uniform(0, 2)
        fit = fit_lasso(x[:, None], y, lam=lam, tol=1e-12)
        expected = np.sign(b_ols) * max(abs(b_ols) - lam, 0.0)
        worst = max(worst, abs(fit.slopes[0] - expected))
    assert worst < 1e-8


def test_lasso_kkt_at_selected_penalty():
    x, y = linear_data(200, 10, seed=3)
    fit = fit_lasso(x, y, seed=1, tol=1e-10)
    excess, resid = fit.kkt_violation(x, y)
    assert excess <= 1e-6 and resid <= 1e-6
    assert fit.coefficients["x1"] > 1.5


def test_lasso_kkt_weighted_and_interactions():
    rng = np.random.default_rng(4)
    x, y = linear_data(150, 4, seed=4)
    w = rng.uniform(0.5, 2.0, 150)
    fit = fit_lasso(x, y, w, lam=0.05, interactions=True, tol=1e-12)
    excess, resid = fit.kkt_violation(x, y, w)
    assert excess <= 1e-6 and resid <= 1e-6
    assert "x1:x2" in fit.names and len(fit.names) == 10


def test_lasso_lambda_max_zeroes_everything():
    x, y = linear_data(100, 6, seed=5)
    lmax = lambda_max(x, y)
    assert np.all(fit_lasso(x, y, lam=lmax * 1.0001).slopes == 0.0)
    assert np.any(fit_lasso(x, y, lam=lmax * 0.9).slopes != 0.0)
    fit = fit_lasso(x, y, lam=lmax * 2)
    assert fit.intercept == pytest.approx(y.mean())


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_lasso_path_monotone_sparsity(seed):
    rng = np.random.default_rng(seed)
    n, p = 60, 8
    x = rng.normal(size=(n, p))
    y = x @ (rng.normal(size=p) * (rng.random(p) < 0.5)) + rng.normal(size=n)
    # orthogonal design: the path is coordinatewise soft-thresholding
    q, _ = np.linalg.qr(x - x.mean(0))
    lams = lambda_max(q, y) * np.logspace(0, -3, 30)
    betas = lasso_path(q, y, lams)
    nnz = (np.abs(betas) > 0).sum(axis=1)
    assert np.all(np.diff(nnz) >= 0)


def test_lasso_destandardized_coefficients():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(300, 2)) * [10.0, 0.1] + [5.0, -3.0]
    y = 0.3 * x[:, 0] + 20.0 * x[:, 1] + 0.01 * rng.normal(size=300)
    fit = fit_lasso(x, y, lam=1e-8, tol=1e-14)
    coef, *_ = np.linalg.lstsq(np.column_stack([np.ones(300), x]), y, rcond=None)
    np.testing.assert_allclose([fit.intercept, *fit.slopes], coef, rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------------------
# tree
# ---------------------------------------------------------------------------

def brute_force_split(x, y, min_leaf=1):
    """Best (feature, threshold, gain) by exhaustive search over midpoints."""
    n, p = x.shape
    base = np.sum((y - y.mean()) ** 2)
    best = (None, None, 0.0)
    for j in range(p):
        vals = np.unique(x[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            t = 0.5 * (a + b)
            left = x[:, j] <= t
            if left.sum() < min_leaf or (~left).sum() < min_leaf:
                continue
            sse = np.sum((y[left] - y[left].mean()) ** 2) + np.sum((y[~left] - y[~left].mean()) ** 2)
            if base - sse > best[2] + 1e-12:
                best = (j, t, base - sse)
    return best


def test_tree_indicator_fixture():
    rng = np.random.default_rng(7)
    x1 = np.r_[rng.uniform(-2, -0.5, 16), rng.uniform(0.5, 2, 16)]
    x = np.column_stack([x1, rng.normal(size=32), rng.normal(size=32)])
    y = (x1 > 0).astype(float)
    j, t, _ = brute_force_split(x, y)
    fit = fit_tree(x, y, min_leaf=1, prune=False)
    assert fit.tree.feature[0] == 0 == j
    assert -0.5 < fit.tree.threshold[0] < 0.5
    assert fit.tree.threshold[0] == pytest.approx(t)
    assert evaluate_oos(fit, x, y) == 0.0


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_tree_root_matches_exhaustive_search(seed, min_leaf):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 3))
    y = np.sin(2 * x[:, 0]) + x[:, 1] ** 2 + 0.1 * rng.normal(size=30)
    j, t, _ = brute_force_split(x, y, min_leaf)
    fit = fit_tree(x, y, min_leaf=min_leaf, prune=False)
    assert fit.tree.feature[0] == j
    assert fit.tree.threshold[0] == pytest.approx(t, abs=1e-12)


def test_tree_pruning_reduces_leaves():
    x, y = linear_data(200, 3, seed=8, noise=2.0)
    full = fit_tree(x, y, prune=False)
    pruned = fit_tree(x, y, prune=True, seed=1)
    assert pruned.n_leaves <= full.n_leaves
    assert full.n_leaves == int(np.sum(full.tree.feature == LEAF))


# ---------------------------------------------------------------------------
# forest and boosting
# ---------------------------------------------------------------------------

def test_forest_is_mean_of_trees():
    x, y = linear_data(150, 4, seed=9)
    fit = fit_forest(x, y, n_trees=25, seed=3)
    xt = np.random.default_rng(1).normal(size=(20, 4))
    per_tree = fit.tree_predictions(xt)
    assert per_tree.shape == (25, 20)
    np.testing.assert_array_equal(fit.predict(xt), per_tree.mean(axis=0))


def test_forest_oob_and_determinism():
    x, y = linear_data(150, 4, seed=9)
    a = fit_forest(x, y, n_trees=40, seed=3)
    b = fit_forest(x, y, n_trees=40, seed=3)
    np.testing.assert_array_equal(a.predict(x), b.predict(x))
    oob = a.predict_oob(x)
    per_tree = a.tree_predictions(x)
    i = int(np.flatnonzero(np.isfinite(oob))[0])
    out = a.inbag[:, i] == 0
    assert oob[i] == pytest.approx(per_tree[out, i].mean(), abs=1e-12)
    sub = fit_forest(x, y, n_trees=10, sample_fraction=0.5, replace=False, seed=1)
    np.testing.assert_array_equal(sub.inbag.sum(axis=1), 75)
    assert sub.inbag.max() == 1


def test_boosting_training_mse_non_increasing():
    x, y = linear_data(200, 3, seed=10)
    fit = fit_boosting(x, y, n_trees=100, depth=2, bag_fraction=1.0, shrinkage=0.1, seed=0)
    assert np.all(np.diff(fit.train_mse) <= 1e-12)
    fit = fit_boosting(x, y, n_trees=60, depths=(1, 3), seed=0)
    assert fit.depth in (1, 3)


# ---------------------------------------------------------------------------
# neural net
# ---------------------------------------------------------------------------

@given(st.integers(0, 10_000), st.integers(1, 4), st.floats(0.0, 0.1))
@settings(max_examples=25, deadline=None)
def test_nn_gradient_matches_finite_differences(seed, hidden, decay):
    rng = np.random.default_rng(seed)
    p = 3
    x = rng.normal(size=(15, p))
    y = rng.normal(size=15)
    w = rng.uniform(0.5, 2, 15)
    theta = rng.normal(size=n_params(p, hidden))
    _, grad = loss_and_grad(theta, x, y, w, decay, hidden)
    h = 1e-6
    fd = np.empty_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        fd[k] = (loss_and_grad(theta + e, x, y, w, decay, hidden)[0]
                 - loss_and_grad(theta - e, x, y, w, decay, hidden)[0]) / (2 * h)
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-6)
    assert rel.max() < 1e-4


def test_nn_fits_and_cv_grid():
    x, y = linear_data(150, 2, seed=11, noise=0.1)
    fit = fit_neural_net(x, y, hidden=2, decay=0.01, seed=1)
    # standardized-scale loss, penalty included: well below the unit target variance
    assert fit.train_loss < 0.25
    assert evaluate_oos(fit, x, y) < 0.25 * np.var(y)
    fit = fit_neural_net(x, y, decay_grid=[0.001, 1.0], hidden_grid=[1, 2], cv_folds=3,
                         max_iter=200, seed=1)
    assert fit.decay in (0.001, 1.0) and fit.hidden in (1, 2)


# ---------------------------------------------------------------------------
# hybrids
# ---------------------------------------------------------------------------

def test_simplex_weights_recover_true_candidate():
    rng = np.random.default_rng(12)
    f = rng.normal(size=200)
    y = f + 0.1 * rng.normal(size=200)
    preds = np.column_stack([rng.normal(size=200), f, rng.normal(size=200)])
    w = simplex_weights(preds, y)
    assert w[1] >= 0.9
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-12)


def test_best_picks_argmin(monkeypatch):
    consts = {"lasso": np.sqrt(0.5), "tree": np.sqrt(0.2), "forest": np.sqrt(0.9)}
    monkeypatch.setattr(learners, "fit_learner",
                        lambda spec, x, y, w=None, names=None: ConstantPredictor(consts[spec.method], 1))
    specs = [LearnerSpec(m) for m in consts]
    fit = fit_hybrid(specs, "best", np.zeros((50, 1)), np.zeros(50))
    np.testing.assert_allclose(fit.losses, [0.5, 0.2, 0.9])
    assert fit.chosen == "tree"
    np.testing.assert_array_equal(fit.weights, [0, 1, 0])


def test_hybrid_identical_candidates():
    x, y = linear_data(120, 3, seed=13)
    spec = LearnerSpec("lasso", {"lam": 0.1})
    single = fit_learner(spec, x, y)
    ens = fit_hybrid([spec, spec], "ensemble", x, y, seed=1)
    np.testing.assert_allclose(ens.weights.sum(), 1.0)
    np.testing.assert_allclose(ens.predict(x), single.predict(x), atol=1e-12)
    best = fit_hybrid([spec, spec], "best", x, y, seed=1)
    np.testing.assert_allclose(best.predict(x), single.predict(x), atol=1e-12)


def test_hybrid_errors():
    spec = LearnerSpec("lasso")
    with pytest.raises(ValueError):
        fit_hybrid([spec], "best", np.zeros((10, 1)), np.zeros(10))
    with pytest.raises(ValueError):
        fit_hybrid([spec, spec], "best", np.zeros((10, 1)), np.zeros(10), holdout_fraction=0.6)
    with pytest.raises(ValueError):
        fit_hybrid([spec, spec], "vote", np.zeros((10, 1)), np.zeros(10))


# ---------------------------------------------------------------------------
# weighted least squares
# ---------------------------------------------------------------------------

def test_wols_examples():
    one = np.ones((2, 1))
    assert weighted_ols(one, [1.0, 3.0]).coefficients["b0"] == pytest.approx(2.0)
    assert weighted_ols(one, [0.0, 4.0], [3.0, 1.0]).coefficients["b0"] == pytest.approx(1.0)


def _wols_fixture(rng):
    n = int(rng.integers(20, 80))
    k = int(rng.integers(1, 5))
    x = np.column_stack([np.ones(n), rng.normal(size=(n, k))])
    y = x @ rng.normal(size=k + 1) + rng.normal(size=n) * rng.uniform(0.5, 2, n)
    w = rng.uniform(0.2, 5.0, n)
    return x, y, w


def test_wols_matches_normal_equations():
    rng = np.random.default_rng(14)
    worst_b = worst_v = 0.0
    for _ in range(100):
        x, y, w = _wols_fixture(rng)
        n, k = x.shape
        xtwx = x.T @ (w[:, None] * x)
        beta = np.linalg.solve(xtwx, x.T @ (w * y))
        bread = np.linalg.inv(xtwx)
        e = y - x @ beta
        meat = (x * (w * e)[:, None]).T @ (x * (w * e)[:, None])
        vcov = n / (n - k) * bread @ meat @ bread
        fit = weighted_ols(x, y, w)
        got = np.array(list(fit.coefficients.values()))
        worst_b = max(worst_b, np.max(np.abs(got - beta)))
        worst_v = max(worst_v, np.max(np.abs(fit.vcov - vcov)))
    assert worst_b < 1e-8 and worst_v < 1e-8


def test_wols_homoskedastic_textbook():
    rng = np.random.default_rng(15)
    x, y, _ = _wols_fixture(rng)
    n, k = x.shape
    beta = np.linalg.solve(x.T @ x, x.T @ y)
    s2 = np.sum((y - x @ beta) ** 2) / (n - k)
    fit = weighted_ols(x, y, variance_mode="homoskedastic")
    np.testing.assert_allclose(list(fit.coefficients.values()), beta, rtol=0, atol=1e-10)
    np.testing.assert_allclose(fit.vcov, s2 * np.linalg.inv(x.T @ x), rtol=0, atol=1e-10)
    assert np.allclose(fit.vcov, fit.vcov.T)
    assert np.all(np.linalg.eigvalsh(fit.vcov) >= -1e-14)


def test_wols_cluster_robust():
    rng = np.random.default_rng(16)
    x, y, w = _wols_fixture(rng)
    n, k = x.shape
    g = rng.integers(0, 8, n)
    fit = weighted_ols(x, y, w, "cluster_robust", cluster_id=g)
    xtwx = x.T @ (w[:, None] * x)
    beta = np.linalg.solve(xtwx, x.T @ (w * y))
    e = y - x @ beta
    bread = np.linalg.inv(xtwx)
    meat = np.zeros((k, k))
    labels = np.unique(g)
    for c in labels:
        s = (x[g == c] * (w * e)[g == c][:, None]).sum(axis=0)
        meat += np.outer(s, s)
    G = len(labels)
    factor = G / (G - 1) * (n - 1) / (n - k)
    np.testing.assert_allclose(fit.vcov, factor * bread @ meat @ bread, rtol=1e-10, atol=1e-14)
    assert fit.n_clusters == G


def test_wols_errors_and_warnings():
    x = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(RankDeficiencyError) as info:
        weighted_ols(x, np.arange(10.0), names=["c", "a", "b"])
    assert info.value.columns == ["b"]
    with pytest.raises(ValueError, match="positive"):
        weighted_ols(np.ones((3, 1)), np.ones(3), [1, 0, 1])
    with pytest.raises(ValueError, match="cluster_id"):
        weighted_ols(np.ones((3, 1)), np.ones(3), variance_mode="cluster_robust")
    rng = np.random.default_rng(0)
    x = np.column_stack([np.ones(30), rng.normal(size=(30, 3))])
    with pytest.warns(RuntimeWarning, match="clusters"):
        fit = weighted_ols(x, rng.normal(size=30), variance_mode="cluster_robust",
                           cluster_id=np.arange(30) % 3)
    assert fit.warnings


def test_wols_contrast():
    rng = np.random.default_rng(17)
    x, y, w = _wols_fixture(rng)
    fit = weighted_ols(x, y, w, names=[f"c{j}" for j in range(x.shape[1])])
    c = fit.contrast({"c0": 1.0, "c1": -1.0})
    assert c.theta == pytest.approx(fit.coefficients["c0"] - fit.coefficients["c1"])
    v = fit.vcov[0, 0] + fit.vcov[1, 1] - 2 * fit.vcov[0, 1]
    assert c.se == pytest.approx(np.sqrt(v))
