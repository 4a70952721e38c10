"""Generic machine-learning inference on heterogeneous treatment effects.

Repeatedly halve the data. On the auxiliary half, learners trained per arm
give a baseline proxy B(Z) and an effect proxy S(Z). On the main half,
weighted regressions estimate the best linear predictor (BLP) of the effect
given S, the sorted group average effects (GATES) and the characteristics of
the most and least affected groups (CLAN). Estimates are medians over
splits; CIs take median bounds at a tightened per-split level, and p-values
are doubled medians.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import DataError, Dataset
from .learners import LearnerError, LearnerSpec, RankDeficiencyError, fit_learner, weighted_ols
from .summary import EstimateSummary, two_sided_p

logger = logging.getLogger(__name__)

PROPENSITY_CLAMP = (0.02, 0.98)
MAX_FAILURE_SHARE = 0.10
P_ADJUSTMENT = "min(1, 2 * median p)"


class GenericMLError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# proxies and propensities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProxyPair:
    """Baseline and effect proxies evaluated on the main sample."""

    b_hat: np.ndarray
    s_hat: np.ndarray
    s_bar: float
    learner_label: str

    @classmethod
    def from_arrays(cls, b_hat, s_hat, label=""):
        b_hat = np.asarray(b_hat, dtype=float)
        s_hat = np.asarray(s_hat, dtype=float)
        if b_hat.shape != s_hat.shape:
            raise ValueError("b_hat and s_hat must have equal length")
        return cls(b_hat, s_hat, float(np.mean(s_hat)), label)


def _both_arms(d) -> bool:
    return bool(np.any(d == 1) and np.any(d == 0))


def fit_proxies(aux: Dataset, main: Dataset, spec: LearnerSpec) -> ProxyPair:
    """Fit one model per arm on ``aux``; ``S = treated - control`` on ``main``."""
    if aux.x_names != main.x_names:
        raise DataError("aux and main covariates differ")
    ctrl, trt = aux.d == 0, aux.d == 1
    if not ctrl.any() or not trt.any():
        raise GenericMLError("auxiliary sample lacks a treatment arm")
    m0 = fit_learner(spec, aux.x[ctrl], aux.y[ctrl])
    m1 = fit_learner(spec, aux.x[trt], aux.y[trt])
    b = m0.predict(main.x)
    return ProxyPair.from_arrays(b, m1.predict(main.x) - b, spec.method)


@dataclass(frozen=True)
class OracleProxy:
    """Known baseline and effect functions, evaluated on the main rows.

    Useful for calibration studies where ``B`` and ``S`` are the true
    ``E[Y(0)|Z]`` and CATE.
    """

    baseline: np.ndarray
    effect: np.ndarray
    label: str = "oracle"

    def proxies(self, main_rows) -> ProxyPair:
        return ProxyPair.from_arrays(self.baseline[main_rows], self.effect[main_rows], self.label)


@dataclass(frozen=True)
class PropensityModel:
    """Per-row treatment probabilities ``p(Z)``, strictly inside (0, 1)."""

    mode: str
    values: np.ndarray

    def __post_init__(self):
        if self.mode not in ("constant", "by_block", "learned"):
            raise ValueError(f"unknown propensity mode {self.mode!r}")
        v = np.asarray(self.values, dtype=float)
        if not np.all((v > 0) & (v < 1)):
            raise ValueError("propensities must lie strictly inside (0, 1)")

    @classmethod
    def constant(cls, data: Dataset) -> "PropensityModel":
        return cls("constant", np.full(data.n, float(np.mean(data.d))))

    @classmethod
    def by_block(cls, data: Dataset) -> "PropensityModel":
        if data.block_id is None:
            raise DataError("by_block propensity needs a block column")
        _, inv = np.unique(data.block_id, return_inverse=True)
        share = np.bincount(inv, weights=data.d) / np.bincount(inv)
        return cls("by_block", share[inv])

    @classmethod
    def learned(cls, data: Dataset, spec: LearnerSpec) -> "PropensityModel":
        fit = fit_learner(spec, data.x, data.d)
        return cls("learned", np.clip(fit.predict(data.x), *PROPENSITY_CLAMP))

    @classmethod
    def build(cls, data: Dataset, mode: str = "constant", spec: LearnerSpec | None = None):
        if mode == "constant":
            return cls.constant(data)
        if mode == "by_block":
            return cls.by_block(data)
        if mode == "learned":
            return cls.learned(data, spec or LearnerSpec("forest", {"n_trees": 200}))
        raise ValueError(f"unknown propensity mode {mode!r}")


# ---------------------------------------------------------------------------
# main-sample estimators
# ---------------------------------------------------------------------------

def _variance_args(main: Dataset):
    if main.cluster_id is not None:
        return dict(variance_mode="cluster_robust", cluster_id=main.cluster_id)
    return dict(variance_mode="hc_robust")


def _baseline_usable(b) -> bool:
    return float(np.var(b)) > 1e-12 * (1.0 + float(np.mean(b)) ** 2)


@dataclass
class BlpFit:
    beta1: EstimateSummary
    beta2: EstimateSummary | None
    fit: object = field(repr=False, default=None)
    notes: list = field(default_factory=list)


def blp(main: Dataset, proxies: ProxyPair, prop, level: float = 0.95) -> BlpFit:
    """Best linear predictor of the effect given the proxy.

    Weighted least squares of ``y`` on ``[1, B, D - p, (D - p)(S - mean S)]``
    with weights ``1 / (p (1 - p))``. ``beta1`` is the average effect and
    ``beta2`` the heterogeneity loading; ``beta2`` is absent when S is
    constant.
    """
    p = np.asarray(prop, dtype=float)
    w = 1.0 / (p * (1.0 - p))
    dp = main.d - p
    cols, names, notes = [np.ones(main.n)], ["const"], []
    if _baseline_usable(proxies.b_hat):
        cols.append(proxies.b_hat)
        names.append("B")
    else:
        notes.append("baseline proxy is constant; dropped")
        logger.warning(notes[-1])
    cols.append(dp)
    names.append("beta1")
    has_s = float(np.var(proxies.s_hat)) > 1e-12 * (1.0 + proxies.s_bar ** 2)
    if has_s:
        cols.append(dp * (proxies.s_hat - proxies.s_bar))
        names.append("beta2")
    else:
        notes.append("effect proxy has zero variance; beta2 omitted")
    fit = weighted_ols(np.column_stack(cols), main.y, w, names=names, **_variance_args(main))
    b1 = fit.summary("beta1", level, "blp_beta1")
    b2 = fit.summary("beta2", level, "blp_beta2") if has_s else None
    return BlpFit(b1, b2, fit, notes)


def quantile_groups(s_hat, k_groups: int = 5) -> np.ndarray:
    """Group labels ``0..K-1`` by rank of ``s_hat`` (index order breaks ties).

    Group sizes differ by at most one; label ``K-1`` holds the largest values.
    """
    s_hat = np.asarray(s_hat, dtype=float)
    n = len(s_hat)
    if not 1 <= k_groups <= n:
        raise ValueError(f"k_groups must lie in [1, {n}]")
    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(s_hat, kind="stable")] = np.arange(n)
    return (rank * k_groups) // n


@dataclass
class GatesFit:
    gammas: list
    difference: EstimateSummary | None
    groups: np.ndarray = field(repr=False, default=None)
    flagged: list = field(default_factory=list)
    fit: object = field(repr=False, default=None)


def gates(main: Dataset, proxies: ProxyPair, prop, k_groups: int = 5, level: float = 0.95,
          groups=None) -> GatesFit:
    """Sorted group average treatment effects.

    Weighted least squares of ``y`` on ``[1, B, (D - p) 1(G_1), ..., (D - p) 1(G_K)]``
    with BLP weights. Groups missing an arm are flagged, get no estimate and
    stay out of the ``gamma_K - gamma_1`` contrast.
    """
    p = np.asarray(prop, dtype=float)
    w = 1.0 / (p * (1.0 - p))
    dp = main.d - p
    g = quantile_groups(proxies.s_hat, k_groups) if groups is None else np.asarray(groups)
    cols, names = [np.ones(main.n)], ["const"]
    if _baseline_usable(proxies.b_hat):
        cols.append(proxies.b_hat)
        names.append("B")
    flagged = []
    for k in range(k_groups):
        sel = g == k
        if not _both_arms(main.d[sel]):
            flagged.append(k)
            continue
        cols.append(dp * sel)
        names.append(f"gamma{k + 1}")
    if len(flagged) == k_groups:
        raise GenericMLError("no GATES group contains both arms")
    fit = weighted_ols(np.column_stack(cols), main.y, w, names=names, **_variance_args(main))
    gammas = [None if k in flagged else fit.summary(f"gamma{k + 1}", level, f"gates_{k + 1}")
              for k in range(k_groups)]
    diff = None
    if k_groups > 1 and 0 not in flagged and k_groups - 1 not in flagged:
        diff = fit.contrast({f"gamma{k_groups}": 1.0, "gamma1": -1.0}, level, "gates_diff")
    return GatesFit(gammas, diff, g, flagged, fit)


@dataclass
class ClanResult:
    mean_most: EstimateSummary
    mean_least: EstimateSummary
    p_diff: float
    note: str = ""


def _group_mean(v, cluster, level, label):
    n = len(v)
    m = float(np.mean(v))
    if n < 2:
        se = float("nan")
    elif cluster is None:
        se = float(np.std(v, ddof=1) / np.sqrt(n))
    else:
        _, inv = np.unique(cluster, return_inverse=True)
        sums = np.bincount(inv, weights=v - m)
        G = len(sums)
        se = float(np.sqrt(G / (G - 1.0) * np.sum(sums**2)) / n) if G > 1 else float("nan")
    return EstimateSummary.from_normal(m, se, level, n, (), label)


def clan(main: Dataset, proxies: ProxyPair, characteristics: Sequence, k_groups: int = 5,
         level: float = 0.95, groups=None) -> dict[str, ClanResult]:
    """Mean characteristics of the most (top group) and least (bottom group) affected.

    ``characteristics`` holds column names of ``main`` or ``(name, values)``
    pairs. Standard errors are cluster-robust when ``main`` has clusters.
    """
    g = quantile_groups(proxies.s_hat, k_groups) if groups is None else np.asarray(groups)
    most, least = g == k_groups - 1, g == 0
    cl = main.cluster_id
    out = {}
    for item in characteristics:
        name, v = (item, main.column(item)) if isinstance(item, str) else item
        v = np.asarray(v, dtype=float)
        a = _group_mean(v[most], None if cl is None else cl[most], level, f"{name}|most")
        b = _group_mean(v[least], None if cl is None else cl[least], level, f"{name}|least")
        se = float(np.hypot(a.se, b.se))
        if np.ptp(v) == 0:
            out[name] = ClanResult(a, b, 1.0, "constant characteristic")
        elif not se > 0:
            out[name] = ClanResult(a, b, 0.0 if a.theta != b.theta else 1.0, "zero within-group variance")
        else:
            out[name] = ClanResult(a, b, two_sided_p((a.theta - b.theta) / se))
    return out


def best_metrics(blp_fit: BlpFit, gates_fit: GatesFit, proxies: ProxyPair) -> dict[str, float]:
    """Targeting quality: ``beta2**2 var(S)`` and ``mean_k gamma_k**2``."""
    lam_blp = 0.0
    if blp_fit.beta2 is not None:
        lam_blp = blp_fit.beta2.theta ** 2 * float(np.var(proxies.s_hat))
    gam = [gk.theta for gk in gates_fit.gammas if gk is not None]
    lam_gates = float(np.mean(np.square(gam))) if gam else 0.0
    return {"lambda_blp": float(lam_blp), "lambda_gates": lam_gates}


# ---------------------------------------------------------------------------
# repeated splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitResult:
    """Everything estimated on one aux/main split for one proxy source."""

    blp: BlpFit
    gates: GatesFit
    clan: dict
    metrics: dict
    correlations: dict = field(default_factory=dict)


def proxy_correlations(main: Dataset, proxies: ProxyPair) -> dict[str, float]:
    """Correlation of each main-sample covariate with S (NaN when either is constant)."""
    s = proxies.s_hat
    out = {}
    for j, name in enumerate(main.x_names):
        v = main.x[:, j]
        ok = np.ptp(v) > 0 and np.ptp(s) > 0
        out[name] = float(np.corrcoef(v, s)[0, 1]) if ok else float("nan")
    return out


@dataclass
class GenericResult:
    label: str
    beta1: EstimateSummary
    beta2: EstimateSummary | None
    gammas: list
    gates_diff: EstimateSummary | None
    clan: dict
    lambda_blp: float
    lambda_gates: float
    n_splits_used: int
    n_splits_failed: int
    level: float
    per_split_level: float
    p_adjustment: str
    correlations: dict = field(default_factory=dict)
    splits: list = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        es = lambda e: None if e is None else e.to_dict()  # noqa: E731
        return {
            "label": self.label,
            "blp": {"beta1": es(self.beta1), "beta2": es(self.beta2)},
            "gates": [es(g) for g in self.gammas],
            "gates_diff": es(self.gates_diff),
            "clan": {k: {"mean_most": es(v.mean_most), "mean_least": es(v.mean_least),
                         "p_diff": v.p_diff} for k, v in self.clan.items()},
            "lambda_blp": self.lambda_blp, "lambda_gates": self.lambda_gates,
            "n_splits_used": self.n_splits_used, "n_splits_failed": self.n_splits_failed,
            "level": self.level, "per_split_level": self.per_split_level,
            "p_adjustment": self.p_adjustment,
            "correlations": self.correlations,
        }


def stratified_halves(data: Dataset, rng: np.random.Generator):
    """Split rows into (aux, main) halves within treatment-by-block strata."""
    block = data.block_id if data.block_id is not None else np.zeros(data.n, dtype=np.int64)
    strata = np.unique(np.column_stack([data.d, block]), axis=0, return_inverse=True)[1].ravel()
    aux, main = [], []
    extra = 0
    for s in range(int(strata.max()) + 1):
        rows = np.flatnonzero(strata == s)
        rows = rows[rng.permutation(len(rows))]
        # odd strata alternate which half receives the extra row
        half = len(rows) // 2 + (extra if len(rows) % 2 else 0)
        if len(rows) % 2:
            extra = 1 - extra
        aux.append(rows[:half])
        main.append(rows[half:])
    return np.sort(np.concatenate(aux)), np.sort(np.concatenate(main))


def median_summary(items: Sequence[EstimateSummary], level, adjust_p=True, label=""):
    """Median point estimate, median CI bounds, median SE and adjusted p."""
    th = np.median([e.theta for e in items])
    se = np.median([e.se for e in items])
    lo = np.median([e.ci_low for e in items])
    hi = np.median([e.ci_high for e in items])
    p = float(np.median([e.p_value for e in items]))
    if adjust_p:
        p = min(1.0, 2.0 * p)
    n = int(np.median([e.n for e in items]))
    return EstimateSummary(float(th), float(se), float(lo), float(hi), p, level, n, (),
                           label or items[0].method_label)


def _median_or_none(items, level, adjust_p):
    kept = [e for e in items if e is not None]
    return median_summary(kept, level, adjust_p) if kept else None


def _one_split(data, source, prop, rows, seed, k_groups, characteristics, level):
    aux_rows, main_rows = rows
    main = data.subset(main_rows)
    if isinstance(source, LearnerSpec):
        proxies = fit_proxies(data.subset(aux_rows), main, source.with_seed(seed))
    else:
        proxies = source.proxies(main_rows)
    pm = np.asarray(prop.values)[main_rows]
    b = blp(main, proxies, pm, level)
    g = gates(main, proxies, pm, k_groups, level)
    c = clan(main, proxies, characteristics, k_groups, level, groups=g.groups)
    return SplitResult(b, g, c, best_metrics(b, g, proxies), proxy_correlations(main, proxies))


def _label(source):
    return source.method if isinstance(source, LearnerSpec) else source.label


def run_generic_ml(data: Dataset, specs: Sequence, prop: PropensityModel | None = None, *,
                   n_splits: int = 100, level: float = 0.90, seed: int = 0, k_groups: int = 5,
                   characteristics: Sequence = (), n_jobs: int = 1) -> list[GenericResult]:
    """Run BLP, GATES, CLAN and the targeting metrics over ``n_splits`` halvings.

    ``specs`` holds :class:`LearnerSpec` or :class:`OracleProxy` entries;
    one :class:`GenericResult` is returned per entry. With several splits,
    per-split intervals use level ``1 - (1 - level)/2`` and p-values are
    reported as ``min(1, 2 * median p)``. A single split is reported as is.
    Up to 10% of splits may fail and are dropped; more aborts the run.
    """
    data.require_binary_treatment()
    if data.n < 100:
        raise DataError(f"generic ML needs n >= 100, got {data.n}")
    if n_splits < 1:
        raise ValueError("n_splits must be >= 1")
    prop = prop or PropensityModel.constant(data)
    multi = n_splits > 1
    split_level = 1.0 - (1.0 - level) / 2.0 if multi else level
    seqs = np.random.SeedSequence(seed).spawn(n_splits)
    plans = []
    for s in range(n_splits):
        rng = np.random.default_rng(seqs[s])
        plans.append((stratified_halves(data, rng), int(rng.integers(2**31 - 1))))

    def work(job):
        j, s = job
        rows, sd = plans[s]
        try:
            return _one_split(data, specs[j], prop, rows, sd, k_groups, characteristics,
                              split_level)
        except (GenericMLError, LearnerError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
            logger.warning("split %d (%s) failed: %s", s, _label(specs[j]), exc)
            return None

    jobs = [(j, s) for j in range(len(specs)) for s in range(n_splits)]
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            flat = list(pool.map(work, jobs))
    else:
        flat = [work(job) for job in jobs]

    results = []
    for j, source in enumerate(specs):
        runs = [r for r in flat[j * n_splits:(j + 1) * n_splits] if r is not None]
        failed = n_splits - len(runs)
        if not runs or failed > MAX_FAILURE_SHARE * n_splits:
            raise GenericMLError(f"{_label(source)}: {failed} of {n_splits} splits failed")
        gam = [_median_or_none([r.gates.gammas[k] for r in runs], level, multi)
               for k in range(k_groups)]
        clan_agg = {}
        for name in runs[0].clan:
            items = [r.clan[name] for r in runs]
            p = float(np.median([c.p_diff for c in items]))
            clan_agg[name] = ClanResult(
                median_summary([c.mean_most for c in items], level, multi),
                median_summary([c.mean_least for c in items], level, multi),
                min(1.0, 2.0 * p) if multi else p)
        results.append(GenericResult(
            label=_label(source),
            beta1=median_summary([r.blp.beta1 for r in runs], level, multi),
            beta2=_median_or_none([r.blp.beta2 for r in runs], level, multi),
            gammas=gam,
            gates_diff=_median_or_none([r.gates.difference for r in runs], level, multi),
            clan=clan_agg,
            lambda_blp=float(np.median([r.metrics["lambda_blp"] for r in runs])),
            lambda_gates=float(np.median([r.metrics["lambda_gates"] for r in runs])),
            n_splits_used=len(runs), n_splits_failed=failed, level=level,
            per_split_level=split_level, p_adjustment=P_ADJUSTMENT if multi else "none",
            correlations={k: float(np.nanmedian([r.correlations[k] for r in runs]))
                          if any(np.isfinite(r.correlations[k]) for r in runs) else float("nan")
                          for k in runs[0].correlations},
            splits=runs,
        ))
    return results
