"""Honest causal forests for conditional average treatment effects.

Each tree is grown on a subsample drawn without replacement (whole clusters
in cluster mode). The subsample is halved: one half chooses the splits, the
other half fills the leaves with treated-minus-control mean differences.
Predictions average leaf effects over trees; the infinitesimal jackknife over
subsample inclusion counts gives their variance.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from ._causal_kernels import LEAF, grow_causal, leaf_index, tree_effects
from .dataset import DataError, Dataset
from .learners import fit_forest
from .summary import EstimateSummary, two_sided_p, z_crit

logger = logging.getLogger(__name__)

FORMAT_NAME = "hteml-causal-forest"
FORMAT_VERSION = 1
MAX_REDRAWS = 20
MIN_OOB_TREES = 10
OVERLAP_BOUNDS = (0.01, 0.99)
IMPORTANCE_DECAY = 0.95
IMPORTANCE_MAX_DEPTH = 4


class ForestError(RuntimeError):
    pass


class TreeGrowthError(ForestError):
    pass


class OverlapError(ForestError):
    pass


@dataclass(frozen=True)
class ForestParams:
    """Causal forest settings.

    ``mtry=None`` means ``max(1, p // 3)``. ``max_depth`` is only a safety
    cap; trees normally stop on the leaf minima.
    """

    n_trees: int = 2000
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_treated_per_leaf: int = 5
    min_control_per_leaf: int = 5
    mtry: int | None = None
    cluster_mode: bool = False
    seed: int = 0
    max_depth: int = 64

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0.0 < self.subsample_fraction < 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1)")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ValueError("honesty_fraction must lie in (0, 1)")
        if self.min_treated_per_leaf < 1 or self.min_control_per_leaf < 1:
            raise ValueError("leaf minima must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")

    def resolved_mtry(self, p: int) -> int:
        m = max(1, p // 3) if self.mtry is None else int(self.mtry)
        if not 1 <= m <= p:
            raise ValueError(f"mtry must lie in [1, {p}], got {m}")
        return m

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# single trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CausalTree:
    """One honest tree; node effects and arm counts come from the estimation rows."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    tau: np.ndarray
    n_treated: np.ndarray
    n_control: np.ndarray
    depth: np.ndarray
    train_rows: np.ndarray
    estimate_rows: np.ndarray

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature == LEAF

    def apply(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=float)
        offsets = np.array([0, len(self.feature)], dtype=np.int64)
        return leaf_index(x, offsets, self.feature, self.threshold, self.left, self.right)[0]

    def predict(self, x) -> np.ndarray:
        return self.tau[self.apply(x)]

    def reestimate(self, x, y, d) -> np.ndarray:
        """Node effects on this frozen structure from new ``(y, d)`` on the estimation rows.

        Internal nodes are left as NaN.
        """
        rows = self.estimate_rows
        leaves = self.apply(np.asarray(x)[rows])
        yr = np.asarray(y, dtype=float)[rows]
        dr = np.asarray(d)[rows]
        out = np.full(len(self.feature), np.nan)
        for leaf in np.flatnonzero(self.is_leaf):
            sel = leaves == leaf
            yt, yc = yr[sel & (dr == 1)], yr[sel & (dr == 0)]
            if len(yt) and len(yc):
                out[leaf] = yt.mean() - yc.mean()
        return out


def _node_buffers(cap):
    return (np.empty(cap, dtype=np.int64), np.empty(cap), np.empty(cap, dtype=np.int64),
            np.empty(cap, dtype=np.int64), np.empty(cap), np.empty(cap, dtype=np.int64),
            np.empty(cap, dtype=np.int64), np.empty(cap, dtype=np.int64))


def _check_arms(d, rows, label):
    arm = d[rows]
    if not (np.any(arm == 1) and np.any(arm == 0)):
        raise TreeGrowthError(f"{label} sample lacks treated or control units")


def grow_causal_tree(x, y, d, train_rows, estimate_rows, *, mtry=None, min_treated=5,
                     min_control=5, max_depth=64, seed=0) -> CausalTree:
    """Grow a single honest causal tree.

    Splits maximize the honest variance-reward criterion on ``train_rows``.
    A split is admissible only if both children keep at least
    ``min_treated`` treated and ``min_control`` control rows among
    ``estimate_rows`` and among the training rows (at least two per arm there).
    """
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    d = np.ascontiguousarray(d, dtype=float)
    train_rows = np.asarray(train_rows, dtype=np.int64)
    estimate_rows = np.asarray(estimate_rows, dtype=np.int64)
    if np.intersect1d(train_rows, estimate_rows).size:
        raise ValueError("train_rows and estimate_rows must be disjoint")
    _check_arms(d, train_rows, "training")
    _check_arms(d, estimate_rows, "estimation")
    p = x.shape[1]
    mtry = max(1, p // 3) if mtry is None else int(mtry)
    bufs = _node_buffers(2 * (len(train_rows) + len(estimate_rows)) + 1)
    m = grow_causal(x, y, d, train_rows, estimate_rows, mtry, int(min_treated),
                    int(min_control), int(max_depth), int(seed), 0, *bufs)
    return CausalTree(*[b[:m].copy() for b in bufs], train_rows=train_rows.copy(),
                      estimate_rows=estimate_rows.copy())


# ---------------------------------------------------------------------------
# forests
# ---------------------------------------------------------------------------

_NODE_FIELDS = ("feature", "threshold", "left", "right", "tau", "n_treated", "n_control", "depth")


@dataclass(frozen=True, eq=False)
class ForestModel:
    """Fitted causal forest.

    Node arrays of all trees are concatenated; tree ``b`` owns
    ``offsets[b]:offsets[b+1]`` and its training/estimation rows sit at
    ``train_offsets[b]:train_offsets[b+1]`` and
    ``estimate_offsets[b]:estimate_offsets[b+1]``. ``inbag[b, u]`` is 1 when
    unit ``u`` (a row, or a cluster in cluster mode) was in tree ``b``'s
    subsample; ``unit_of_row`` maps rows to units.
    """

    params: ForestParams
    offsets: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    tau: np.ndarray
    n_treated: np.ndarray
    n_control: np.ndarray
    depth: np.ndarray
    inbag: np.ndarray
    unit_of_row: np.ndarray
    subsample_units: int
    train_offsets: np.ndarray
    train_rows: np.ndarray
    estimate_offsets: np.ndarray
    estimate_rows: np.ndarray
    x_train: np.ndarray
    x_names: tuple
    fingerprint: str
    y_center: float = 0.0
    aborted_trees: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_units(self) -> int:
        return self.inbag.shape[1]

    def tree(self, b: int) -> CausalTree:
        lo, hi = self.offsets[b], self.offsets[b + 1]
        nodes = [getattr(self, f)[lo:hi] for f in _NODE_FIELDS]
        tr = self.train_rows[self.train_offsets[b]:self.train_offsets[b + 1]]
        es = self.estimate_rows[self.estimate_offsets[b]:self.estimate_offsets[b + 1]]
        return CausalTree(*nodes, train_rows=tr, estimate_rows=es)

    def trees(self):
        return [self.tree(b) for b in range(self.n_trees)]


def _units(data: Dataset, cluster_mode: bool):
    if not cluster_mode:
        return np.arange(data.n, dtype=np.int64), data.n
    if data.cluster_id is None:
        raise DataError("cluster_mode requires a cluster column")
    _, unit = np.unique(data.cluster_id, return_inverse=True)
    return unit.astype(np.int64), int(unit.max()) + 1


def _draw_tree_rows(rng, d, unit_of_row, rows_of_unit, n_units, s_units, honesty):
    """Subsample units, split them into training/estimation halves, return rows."""
    for _ in range(MAX_REDRAWS + 1):
        units = rng.choice(n_units, s_units, replace=False)
        n_tr = int(np.floor(honesty * s_units))
        tr_u, es_u = units[:n_tr], units[n_tr:]
        tr = np.sort(np.concatenate([rows_of_unit[u] for u in tr_u]))
        es = np.sort(np.concatenate([rows_of_unit[u] for u in es_u]))
        if len(tr) and len(es) and np.ptp(d[tr]) > 0 and np.ptp(d[es]) > 0:
            return units, tr, es
    return None


def _grow_one(b, seq, x, yc, d, params, mtry, unit_of_row, rows_of_unit, n_units, s_units):
    rng = np.random.default_rng(seq)
    drawn = _draw_tree_rows(rng, d, unit_of_row, rows_of_unit, n_units, s_units,
                            params.honesty_fraction)
    if drawn is None:
        logger.warning("tree %d aborted: no subsample with both arms after %d re-draws",
                       b, MAX_REDRAWS)
        return None
    units, tr, es = drawn
    tree_seed = int(rng.integers(2**31 - 1))
    bufs = _node_buffers(2 * (len(tr) + len(es)) + 1)
    m = grow_causal(x, yc, d, tr, es, mtry, params.min_treated_per_leaf,
                    params.min_control_per_leaf, params.max_depth, tree_seed, 0, *bufs)
    return units, tr, es, [a[:m].copy() for a in bufs]


def fit_causal_forest(data: Dataset, params: ForestParams = ForestParams(), *,
                      n_jobs: int = 1) -> ForestModel:
    """Grow ``params.n_trees`` honest trees on independent subsamples.

    Each tree derives its random stream from ``params.seed`` and its index
    only, so results do not depend on ``n_jobs``.
    """
    data.require_binary_treatment()
    if data.n < 50:
        raise DataError(f"causal forest needs n >= 50, got {data.n}")
    unit_of_row, n_units = _units(data, params.cluster_mode)
    if params.cluster_mode and n_units < 10:
        raise DataError(f"cluster_mode needs >= 10 clusters, got {n_units}")
    mtry = params.resolved_mtry(data.p)
    need = 2 * (params.min_treated_per_leaf + params.min_control_per_leaf)
    if params.subsample_fraction * data.n < need:
        raise ValueError(f"subsample_fraction * n must be >= {need}")
    s_units = max(2, int(np.floor(params.subsample_fraction * n_units)))

    x = np.ascontiguousarray(data.x, dtype=float)
    d = np.ascontiguousarray(data.d, dtype=float)
    # effects are differences of means, so centering only improves conditioning
    y_center = float(np.mean(data.y))
    yc = np.ascontiguousarray(data.y - y_center)
    order = np.argsort(unit_of_row, kind="stable")
    bounds = np.searchsorted(unit_of_row[order], np.arange(n_units + 1))
    rows_of_unit = [order[bounds[u]:bounds[u + 1]] for u in range(n_units)]
    seqs = np.random.SeedSequence(params.seed).spawn(params.n_trees)

    def work(b):
        return _grow_one(b, seqs[b], x, yc, d, params, mtry, unit_of_row, rows_of_unit,
                         n_units, s_units)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            grown = list(pool.map(work, range(params.n_trees)))
    else:
        grown = [work(b) for b in range(params.n_trees)]
    kept = [g for g in grown if g is not None]
    aborted = len(grown) - len(kept)
    if not kept:
        raise TreeGrowthError("every tree aborted: subsamples never contained both arms")

    inbag = np.zeros((len(kept), n_units), dtype=np.int8)
    for b, (units, _, _, _) in enumerate(kept):
        inbag[b, units] = 1
    offsets = np.cumsum([0] + [len(g[3][0]) for g in kept]).astype(np.int64)
    nodes = [np.concatenate([g[3][k] for g in kept]) for k in range(len(_NODE_FIELDS))]
    tr_off = np.cumsum([0] + [len(g[1]) for g in kept]).astype(np.int64)
    es_off = np.cumsum([0] + [len(g[2]) for g in kept]).astype(np.int64)
    return ForestModel(
        params, offsets, *nodes, inbag=inbag, unit_of_row=unit_of_row, subsample_units=s_units,
        train_offsets=tr_off, train_rows=np.concatenate([g[1] for g in kept]),
        estimate_offsets=es_off, estimate_rows=np.concatenate([g[2] for g in kept]),
        x_train=x, x_names=tuple(data.x_names), fingerprint=data.fingerprint(),
        y_center=y_center, aborted_trees=aborted,
    )


# ---------------------------------------------------------------------------
# prediction and infinitesimal-jackknife variance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CatePrediction:
    """Per-row effect predictions.

    ``valid`` is False for OOB rows left out by fewer than
    ``MIN_OOB_TREES`` trees; their ``tau`` and ``variance`` are NaN.
    """

    tau: np.ndarray
    variance: np.ndarray
    oob: bool
    n_trees_used: np.ndarray
    valid: np.ndarray
    clamp_rate: float


def ij_variance(inbag, preds, subsample_size, admissible=None, bias_correct=True):
    """Infinitesimal-jackknife variance of tree averages.

    Parameters
    ----------
    inbag : (B, n) array
        Subsample inclusion counts per tree and unit.
    preds : (B, q) array
        Tree predictions for the query points.
    subsample_size : int
        Units per subsample, ``s``.
    admissible : (B, q) bool array, optional
        Trees that enter each query's average (all by default).
    bias_correct : bool
        Subtract the Monte Carlo noise term.

    Returns
    -------
    variance : (q,) array, clamped at 0 when ``bias_correct``
    clamped : (q,) bool array, where the correction would go negative

    Notes
    -----
    With ``C[i, j] = cov_b(N_bi, t_bj)`` over admissible trees the raw
    estimate is ``(n-1)/n * (n/(n-s))**2 * sum_i C[i, j]**2``. The noise
    term replaces the sum by ``n * (s/n) * (1 - s/n) * var_b(t_bj) / B_j``.
    """
    N = np.asarray(inbag, dtype=float)
    T = np.asarray(preds, dtype=float)
    B, n = N.shape
    A = np.ones(T.shape, dtype=bool) if admissible is None else np.asarray(admissible, bool)
    Af = A.astype(float)
    nb = Af.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        tbar = (Af * T).sum(axis=0) / nb
        tc = np.where(A, T - tbar, 0.0)
        # sum_b tc[b, j] = 0 over admissible trees, so N needs no centering
        C = (N.T @ tc) / nb
        raw = np.sum(C * C, axis=0)
        s = float(subsample_size)
        scale = (n - 1.0) / n * (n / (n - s)) ** 2
        var_raw = scale * raw
        if not bias_correct:
            return var_raw, np.zeros(len(raw), dtype=bool)
        var_t = np.sum(tc * tc, axis=0) / nb
        noise = scale * n * (s / n) * (1.0 - s / n) * var_t / nb
    v = var_raw - noise
    clamped = v < 0
    return np.where(clamped, 0.0, v), clamped


def predict_cate(model: ForestModel, x=None, *, oob: bool = False, rows=None,
                 variance: bool = True) -> CatePrediction:
    """Average leaf effects over trees.

    With ``oob=True`` predictions are for training rows (``rows``, default
    all) and use only trees whose subsample excluded the row's unit;
    otherwise ``x`` (default the training covariates) is scored by every tree.
    """
    if oob:
        if x is not None:
            raise ValueError("oob predictions are defined for training rows only; pass rows")
        rows = np.arange(model.x_train.shape[0]) if rows is None else np.asarray(rows)
        xq = model.x_train[rows]
        admissible = model.inbag[:, model.unit_of_row[rows]] == 0
    else:
        xq = model.x_train if x is None else np.asarray(x, dtype=float)
        if xq.ndim != 2 or xq.shape[1] != model.x_train.shape[1]:
            raise ValueError(f"expected {model.x_train.shape[1]} covariate columns")
        admissible = None
    xq = np.ascontiguousarray(xq, dtype=float)
    T = tree_effects(xq, model.offsets, model.feature, model.threshold, model.left,
                     model.right, model.tau)
    if admissible is None:
        used = np.full(xq.shape[0], model.n_trees)
        tau = T.mean(axis=0)
        valid = np.ones(xq.shape[0], dtype=bool)
    else:
        used = admissible.sum(axis=0)
        valid = used >= MIN_OOB_TREES
        with np.errstate(invalid="ignore", divide="ignore"):
            tau = np.where(admissible, T, 0.0).sum(axis=0) / used
    if variance:
        var, clamped = ij_variance(model.inbag, T, model.subsample_units, admissible)
        clamp_rate = float(np.mean(clamped[valid])) if valid.any() else 0.0
    else:
        var = np.full(xq.shape[0], np.nan)
        clamp_rate = float("nan")
    tau = np.where(valid, tau, np.nan)
    var = np.where(valid, var, np.nan)
    if oob and not valid.all():
        logger.warning("%d rows are out-of-bag in fewer than %d trees", int((~valid).sum()),
                       MIN_OOB_TREES)
    return CatePrediction(tau, var, oob, used, valid, clamp_rate)


# ---------------------------------------------------------------------------
# doubly robust scores and average effects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DrScores:
    """Per-row doubly robust scores and the nuisances behind them."""

    scores: np.ndarray
    tau_oob: np.ndarray
    m_hat: np.ndarray
    e_hat: np.ndarray
    cluster: np.ndarray | None


def _oob_forest(x, target, n_trees, seed):
    f = fit_forest(x, target, n_trees=n_trees, min_leaf=5, sample_fraction=0.5, replace=False,
                   seed=seed)
    out = f.predict_oob(x)
    if np.any(np.isnan(out)):
        out = np.where(np.isnan(out), f.predict(x), out)
    return out


def estimate_propensity(data: Dataset, propensity="forest", *, n_trees=500, seed=0):
    """Propensity scores for the doubly robust scores.

    ``propensity`` is a float (known constant), ``"constant"`` (sample
    treated share), ``"block"`` (treated share within ``block_id``) or
    ``"forest"`` (out-of-bag regression forest of d on x).
    """
    d = data.d
    if isinstance(propensity, (int, float)) and not isinstance(propensity, bool):
        if not 0.0 < propensity < 1.0:
            raise ValueError("known propensity must lie in (0, 1)")
        return np.full(data.n, float(propensity))
    if propensity == "constant":
        return np.full(data.n, float(np.mean(d)))
    if propensity == "block":
        if data.block_id is None:
            raise DataError("block propensity needs a block column")
        _, inv = np.unique(data.block_id, return_inverse=True)
        share = np.bincount(inv, weights=d) / np.bincount(inv)
        return share[inv]
    if propensity == "forest":
        return _oob_forest(np.ascontiguousarray(data.x), np.asarray(d, float), n_trees, seed)
    raise ValueError(f"unknown propensity mode {propensity!r}")


def _check_same_data(model: ForestModel, data: Dataset):
    if data.fingerprint() != model.fingerprint:
        raise DataError("dataset does not match the one the forest was fitted on")


def dr_scores(model: ForestModel, data: Dataset, *, propensity="forest",
              nuisance_trees: int = 500) -> DrScores:
    """Augmented inverse-propensity scores from out-of-bag nuisance estimates.

    ``score_i = tau_i + (W_i - e_i) / (e_i (1 - e_i)) * (Y_i - m_i - (W_i - e_i) tau_i)``
    with ``m = E[Y|X]``, ``e = P(W=1|X)`` and ``tau`` the forest's OOB effect.
    """
    _check_same_data(model, data)
    pred = predict_cate(model, oob=True, variance=False)
    if not pred.valid.all():
        raise ForestError(f"{int((~pred.valid).sum())} rows have fewer than {MIN_OOB_TREES} "
                          "out-of-bag trees; grow more trees")
    seed = int(np.random.SeedSequence([model.params.seed, 7]).generate_state(1)[0])
    x = np.ascontiguousarray(data.x)
    m_hat = _oob_forest(x, np.asarray(data.y, float), nuisance_trees, seed)
    e_hat = _trim_propensity(estimate_propensity(data, propensity, n_trees=nuisance_trees,
                                                 seed=seed + 1))
    scores = _aipw(data.y, data.d, pred.tau, m_hat, e_hat)
    cluster = model.unit_of_row if model.params.cluster_mode else None
    return DrScores(scores, pred.tau, m_hat, e_hat, cluster)


def _trim_propensity(e_hat):
    lo, hi = OVERLAP_BOUNDS
    outside = float(np.mean((e_hat < lo) | (e_hat > hi)))
    if outside > 0.05:
        raise OverlapError(f"{outside:.1%} of propensities fall outside [{lo}, {hi}]")
    return np.clip(e_hat, lo, hi)


def _aipw(y, w, tau, m_hat, e_hat):
    resid = w - e_hat
    return tau + resid / (e_hat * (1.0 - e_hat)) * (y - m_hat - resid * tau)


def _mean_with_se(scores, cluster=None):
    n = len(scores)
    theta = float(np.mean(scores))
    if cluster is None:
        return theta, float(np.std(scores, ddof=1) / np.sqrt(n))
    _, g = np.unique(cluster, return_inverse=True)
    sums = np.bincount(g, weights=scores - theta)
    G = len(sums)
    return theta, float(np.sqrt(G / (G - 1.0) * np.sum(sums**2)) / n)


def _group_summary(sc: DrScores, mask, label, level):
    if not np.any(mask):
        raise ForestError(f"group {label!r} is empty")
    if mask.sum() < 2:
        raise ForestError(f"group {label!r} has fewer than 2 rows")
    cl = None if sc.cluster is None else sc.cluster[mask]
    theta, se = _mean_with_se(sc.scores[mask], cl)
    return EstimateSummary.from_normal(theta, se, level, int(mask.sum()), (), label)


def forest_ate(model: ForestModel, data: Dataset, *, scores: DrScores | None = None,
               propensity="forest", level: float = 0.95) -> EstimateSummary:
    """Average treatment effect as the mean of doubly robust scores.

    The standard error is ``sd(scores)/sqrt(n)``, or the cluster-robust
    version from per-cluster score sums in cluster mode.
    """
    sc = scores if scores is not None else dr_scores(model, data, propensity=propensity)
    return _group_summary(sc, np.ones(len(sc.scores), dtype=bool), "forest_ate[aipw]", level)


@dataclass(frozen=True)
class HeterogeneityResult:
    ate_above: EstimateSummary
    ate_below: EstimateSummary
    difference: float
    diff_ci: tuple
    median_cate: tuple
    degenerate_grouping: bool


def _halves(model: ForestModel, data: Dataset, seed):
    """Boolean mask of a random half of the units, stratified by arm unless clustered."""
    rng = np.random.default_rng(seed)
    unit = model.unit_of_row
    if model.params.cluster_mode:
        units = rng.permutation(model.n_units)
        return np.isin(unit, units[: model.n_units // 2])
    first = np.zeros(data.n, dtype=bool)
    for arm in (0.0, 1.0):
        rows = rng.permutation(np.flatnonzero(data.d == arm))
        first[rows[: len(rows) // 2]] = True
    return first


def _half_propensity(fit_data: Dataset, x_eval, full: Dataset, rows, propensity, n_trees,
                     seed):
    if propensity == "forest":
        f = fit_forest(np.ascontiguousarray(fit_data.x), np.asarray(fit_data.d, float),
                       n_trees=n_trees, min_leaf=5, sample_fraction=0.5, replace=False,
                       seed=seed)
        return f.predict(x_eval)
    # the other modes use treatment labels only
    return estimate_propensity(full, propensity)[rows]


def heterogeneity_test(model: ForestModel, data: Dataset, *, propensity="forest",
                       level: float = 0.95, nuisance_trees: int = 500) -> HeterogeneityResult:
    """Compare average effects above and below the median predicted effect.

    The units are split into two halves (stratified by arm, or by whole
    clusters in cluster mode). Rows of each half are ranked by the effect
    predicted by a forest grown on the other half with the model's
    parameters and grouped at that half's median, ties going to ``below``.
    Their doubly robust scores use outcome and propensity nuisances also
    fitted on the other half, so neither the grouping nor the nuisances
    depend on the half's own outcomes.

    Ranking by the fitted forest's own out-of-bag effects would not be
    valid: under no heterogeneity a row's leave-out prediction is
    negatively correlated with its own noise relative to its neighbours',
    which biases the difference and understates its standard error.
    The two halves' group means are averaged as in :func:`_across_halves`.
    """
    _check_same_data(model, data)
    base = int(np.random.SeedSequence([model.params.seed, 13]).generate_state(1)[0])
    first = _halves(model, data, base)
    scores = np.empty(data.n)
    tau = np.empty(data.n)
    below = np.zeros(data.n, dtype=bool)
    medians, ties = [], 0
    for h, part in enumerate((first, ~first)):
        rows, other = np.flatnonzero(part), np.flatnonzero(~part)
        fit_data = data.subset(other)
        kw = model.params.to_dict()
        kw["seed"] = model.params.seed + 1 + h
        try:
            forest = fit_causal_forest(fit_data, ForestParams(**kw))
        except (DataError, ValueError) as exc:
            raise ForestError(f"heterogeneity test cannot grow a half-sample forest: {exc}") \
                from None
        x_eval = np.ascontiguousarray(data.x[rows])
        t = predict_cate(forest, x_eval, variance=False).tau
        m = fit_forest(np.ascontiguousarray(fit_data.x), np.asarray(fit_data.y, float),
                       n_trees=nuisance_trees, min_leaf=5, sample_fraction=0.5, replace=False,
                       seed=base + 2 + h).predict(x_eval)
        e = _trim_propensity(_half_propensity(fit_data, x_eval, data, rows, propensity,
                                              nuisance_trees, base + 4 + h))
        med = float(np.median(t))
        medians.append(med)
        ties += int(np.sum(t == med))
        tau[rows] = t
        below[rows] = t <= med
        scores[rows] = _aipw(data.y[rows], data.d[rows], t, m, e)
    degenerate = ties / data.n > 0.4
    if degenerate:
        logger.warning("%.0f%% of predicted effects tie with the median; grouping is degenerate",
                       100 * ties / data.n)
    cluster = model.unit_of_row if model.params.cluster_mode else None
    sc = DrScores(scores, tau, np.full(data.n, np.nan), np.full(data.n, np.nan), cluster)
    a = _across_halves(sc, ~below, first, "above_median_cate", level)
    b = _across_halves(sc, below, first, "below_median_cate", level)
    diff = a.theta - b.theta
    half = z_crit(level) * float(np.hypot(a.se, b.se))
    return HeterogeneityResult(a, b, diff, (diff - half, diff + half), tuple(medians),
                               degenerate)


def _across_halves(sc: DrScores, mask, first, label, level):
    """Average of the two half-sample group means.

    Each half's grouping depends on the other half's outcomes, so the two
    means are correlated; the average of their standard errors bounds the
    standard error of their average for any correlation.
    """
    parts = [_group_summary(sc, mask & part, label, level) for part in (first, ~first)]
    theta = 0.5 * (parts[0].theta + parts[1].theta)
    se = 0.5 * (parts[0].se + parts[1].se)
    return EstimateSummary.from_normal(theta, se, level, int(mask.sum()), (), label)


@dataclass(frozen=True)
class SubgroupResult:
    below: EstimateSummary
    above: EstimateSummary
    p_diff: float
    covariate: str
    threshold: float


def subgroup_ate(model: ForestModel, data: Dataset, covariate: str, threshold="median", *,
                 scores: DrScores | None = None, propensity="forest",
                 level: float = 0.95) -> SubgroupResult:
    """Average effects for rows with ``covariate <= threshold`` and above it."""
    v = data.column(covariate)
    thr = float(np.median(v)) if threshold == "median" else float(threshold)
    low = v <= thr
    if low.all() or not low.any():
        raise ForestError(f"splitting {covariate!r} at {thr} leaves one side empty")
    sc = scores if scores is not None else dr_scores(model, data, propensity=propensity)
    b = _group_summary(sc, low, f"{covariate}<={thr:g}", level)
    a = _group_summary(sc, ~low, f"{covariate}>{thr:g}", level)
    se = float(np.hypot(a.se, b.se))
    p = two_sided_p((a.theta - b.theta) / se) if se > 0 else float(a.theta == b.theta)
    return SubgroupResult(b, a, p, covariate, thr)


def variable_importance(model: ForestModel) -> list[tuple[str, float]]:
    """Depth-weighted split frequencies, normalized to sum to one.

    Splits at depth ``k < 4`` count ``0.95**k``. Returns ``(name, share)``
    pairs in descending order, or an empty list when no tree ever split.
    """
    internal = (model.feature != LEAF) & (model.depth < IMPORTANCE_MAX_DEPTH)
    if not internal.any():
        return []
    w = IMPORTANCE_DECAY ** model.depth[internal].astype(float)
    raw = np.bincount(model.feature[internal], weights=w, minlength=len(model.x_names))
    share = raw / raw.sum()
    order = np.argsort(-share, kind="stable")
    return [(model.x_names[j], float(share[j])) for j in order]


# ---------------------------------------------------------------------------
# tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TuningResult:
    best: ForestParams
    draws: tuple
    losses: tuple


def tune_forest(data: Dataset, base: ForestParams = ForestParams(), *, n_draws: int = 20,
                n_trees: int = 200, seed: int = 0, n_jobs: int = 1) -> TuningResult:
    """Random search over subsample fraction, mtry and leaf minima.

    Each draw grows a small forest and is scored by the out-of-bag
    R-loss ``mean(((Y - m) - (W - e) * tau_oob)**2)`` with fixed OOB
    nuisances. The best draw is returned with ``base.n_trees`` restored.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    x = np.ascontiguousarray(data.x)
    m_hat = _oob_forest(x, np.asarray(data.y, float), 300, seed)
    e_hat = np.clip(_oob_forest(x, np.asarray(data.d, float), 300, seed + 1), *OVERLAP_BOUNDS)
    ry, rw = data.y - m_hat, data.d - e_hat
    draws, losses = [], []
    for k in range(n_draws):
        leaf = int(rng.integers(1, 21))
        cand = ForestParams(
            n_trees=n_trees, subsample_fraction=float(rng.uniform(0.2, 0.5)),
            honesty_fraction=base.honesty_fraction, min_treated_per_leaf=leaf,
            min_control_per_leaf=leaf, mtry=int(rng.integers(1, data.p + 1)),
            cluster_mode=base.cluster_mode, seed=base.seed + k + 1, max_depth=base.max_depth)
        if cand.subsample_fraction * data.n < 4 * leaf:
            continue
        model = fit_causal_forest(data, cand, n_jobs=n_jobs)
        tau = predict_cate(model, oob=True, variance=False).tau
        ok = np.isfinite(tau)
        loss = float(np.mean((ry[ok] - rw[ok] * tau[ok]) ** 2))
        draws.append(cand)
        losses.append(loss)
    if not draws:
        raise ForestError("no admissible tuning draw for this sample size")
    best = draws[int(np.argmin(losses))]
    kw = best.to_dict()
    kw.update(n_trees=base.n_trees, seed=base.seed)
    return TuningResult(ForestParams(**kw), tuple(draws), tuple(losses))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_ARRAY_FIELDS = ("offsets", *_NODE_FIELDS, "inbag", "unit_of_row", "train_offsets",
                 "train_rows", "estimate_offsets", "estimate_rows", "x_train")


def save_forest(model: ForestModel, path) -> None:
    """Write a forest to an ``.npz`` container.

    The ``header`` entry is a JSON document with ``format``, ``version``,
    ``params``, ``x_names``, ``fingerprint`` and scalar metadata; every
    other entry is one of the model's arrays under its field name.
    """
    header = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION, "params": model.params.to_dict(),
        "x_names": list(model.x_names), "fingerprint": model.fingerprint,
        "subsample_units": model.subsample_units, "y_center": model.y_center,
        "aborted_trees": model.aborted_trees,
    }
    arrays = {k: getattr(model, k) for k in _ARRAY_FIELDS}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_forest(path) -> ForestModel:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: not a causal forest file")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header.get('version')}")
        arrays = {k: z[k] for k in _ARRAY_FIELDS}
    known = {f.name for f in fields(ForestParams)}
    params = ForestParams(**{k: v for k, v in header["params"].items() if k in known})
    return ForestModel(params=params, x_names=tuple(header["x_names"]),
                       fingerprint=header["fingerprint"],
                       subsample_units=int(header["subsample_units"]),
                       y_center=float(header["y_center"]),
                       aborted_trees=int(header["aborted_trees"]), **arrays)
