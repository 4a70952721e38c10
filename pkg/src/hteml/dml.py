"""Double/debiased machine learning for partially linear (IV) models.

Nuisances are cross-fitted over K folds. Residuals are pooled across the
folds of a repetition before the residual-on-residual regression, and
repetitions are combined with :func:`aggregate_splits`.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, make_split_plan, redraw_repetition
from .learners import LearnerError, LearnerSpec, fit_learner
from .summary import EstimateSummary

logger = logging.getLogger(__name__)

MAX_REDRAWS = 20
_ROLE_G, _ROLE_M, _ROLE_Z = 0, 1, 2


class DmlError(RuntimeError):
    pass


@dataclass(frozen=True)
class DmlConfig:
    learner_spec_g: LearnerSpec
    learner_spec_m: LearnerSpec
    learner_spec_r: LearnerSpec | None = None
    k_folds: int = 2
    s_repetitions: int = 100
    aggregation: str = "median"
    seed: int = 0
    level: float = 0.95
    n_jobs: int = 1

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.s_repetitions < 1:
            raise ValueError("s_repetitions must be >= 1")
        if self.aggregation not in ("median", "mean"):
            raise ValueError("aggregation must be 'median' or 'mean'")

    def to_dict(self) -> dict:
        return {
            "learner_spec_g": self.learner_spec_g.to_dict(),
            "learner_spec_m": self.learner_spec_m.to_dict(),
            "learner_spec_r": None if self.learner_spec_r is None else self.learner_spec_r.to_dict(),
            "k_folds": self.k_folds, "s_repetitions": self.s_repetitions,
            "aggregation": self.aggregation, "seed": self.seed, "level": self.level,
        }


def residual_regression(v, w) -> tuple[float, float]:
    """No-intercept regression of ``w`` on ``v`` with an HC0 standard error."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.shape != w.shape or v.size < 2:
        raise ValueError("v and w must have equal length >= 2")
    svv = float(v @ v)
    if svv <= 0.0:
        raise DmlError("treatment fully explained by covariates")
    theta = float(v @ w) / svv
    eps = w - theta * v
    se = float(np.sqrt(np.sum(v**2 * eps**2))) / svv
    return theta, se


def iv_residual_regression(zr, v, w, n_tol=1e-10) -> tuple[float, float]:
    """Just-identified IV on residuals: ``sum(z*w) / sum(z*v)`` with a robust SE."""
    zr, v, w = (np.asarray(a, dtype=float) for a in (zr, v, w))
    szv = float(zr @ v)
    if abs(szv) < n_tol * len(v):
        raise DmlError("weak residual instrument")
    theta = float(zr @ w) / szv
    psi = zr * (w - theta * v)
    se = float(np.sqrt(np.sum(psi**2))) / abs(szv)
    return theta, se


def aggregate_splits(per_split, mode="median") -> tuple[float, float]:
    """Combine per-repetition ``(theta_s, se_s)`` pairs.

    The standard error of each split is inflated by its distance from the
    aggregate, ``sqrt(se_s**2 + (theta_s - theta)**2)``, before taking the
    median (or mean).
    """
    arr = np.asarray(per_split, dtype=float).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ValueError("per_split is empty")
    thetas, ses = arr[:, 0], arr[:, 1]
    if arr.shape[0] == 1:
        return float(thetas[0]), float(ses[0])
    center = np.median if mode == "median" else np.mean
    theta = float(center(thetas))
    se = float(center(np.sqrt(ses**2 + (thetas - theta) ** 2)))
    return theta, se


@dataclass
class CrossFit:
    """Cross-fitted residuals for one repetition plus fold bookkeeping."""

    labels: np.ndarray
    resid_y: np.ndarray
    resid_d: np.ndarray
    resid_z: np.ndarray | None = None
    train_sets: list = field(default_factory=list)


def _seed(base, rep, fold, role):
    return int(np.random.SeedSequence([base, rep, fold, role]).generate_state(1)[0])


def _both_arms(d):
    return np.any(d == 0) and np.any(d == 1)


def _degenerate(labels, d, k):
    binary = np.all((d == 0) | (d == 1))
    for f in range(k):
        test = labels == f
        if test.sum() < 2 or (~test).sum() < 2:
            return True
        if binary and (not _both_arms(d[test]) or not _both_arms(d[~test])):
            return True
    return False


def _fit_predict(spec, x_tr, t_tr, x_te, seed, context):
    try:
        return fit_learner(spec.with_seed(seed), x_tr, t_tr).predict(x_te)
    except LearnerError as exc:
        raise DmlError(f"{context}: {exc}") from exc


def cross_fit(data: Dataset, config: DmlConfig, labels, rep: int, instrument=None) -> CrossFit:
    """Residualize y, d (and an instrument) against x over the folds in ``labels``."""
    n = data.n
    ry = np.empty(n)
    rd = np.empty(n)
    rz = None if instrument is None else np.empty(n)
    spec_r = config.learner_spec_r or config.learner_spec_m
    train_sets = []
    for f in range(config.k_folds):
        te = np.flatnonzero(labels == f)
        tr = np.flatnonzero(labels != f)
        if len(te) < 2:
            raise DmlError(f"repetition {rep}, fold {f}: fewer than 2 observations")
        train_sets.append(tr)
        ctx = f"repetition {rep}, fold {f}"
        ry[te] = data.y[te] - _fit_predict(config.learner_spec_g, data.x[tr], data.y[tr], data.x[te],
                                           _seed(config.seed, rep, f, _ROLE_G), ctx + " (outcome)")
        rd[te] = data.d[te] - _fit_predict(config.learner_spec_m, data.x[tr], data.d[tr], data.x[te],
                                           _seed(config.seed, rep, f, _ROLE_M), ctx + " (treatment)")
        if instrument is not None:
            # same seed stream as the treatment nuisance: z == d reproduces the PLM residuals
            rz[te] = instrument[te] - _fit_predict(spec_r, data.x[tr], instrument[tr], data.x[te],
                                                   _seed(config.seed, rep, f, _ROLE_M),
                                                   ctx + " (instrument)")
    return CrossFit(labels, ry, rd, rz, train_sets)


def _labels_for(plan, rep, d):
    labels = plan.assignment[rep]
    attempt = 0
    while _degenerate(labels, d, plan.k_folds):
        if attempt >= MAX_REDRAWS:
            raise DmlError(f"repetition {rep}: no non-degenerate partition after {MAX_REDRAWS} redraws")
        labels = redraw_repetition(plan, rep, attempt)
        attempt += 1
    return labels


def synthetic_instrument(data: Dataset, config: DmlConfig, labels, rep: int) -> np.ndarray:
    """Cross-fitted prediction of d from (instruments, x), used when q > 1."""
    zx = np.column_stack([data.instrument, data.x])
    out = np.empty(data.n)
    spec = config.learner_spec_r or config.learner_spec_m
    for f in range(config.k_folds):
        te = np.flatnonzero(labels == f)
        tr = np.flatnonzero(labels != f)
        out[te] = _fit_predict(spec, zx[tr], data.d[tr], zx[te], _seed(config.seed, rep, f, _ROLE_Z),
                               f"repetition {rep}, fold {f} (first stage)")
    return out


def _run(data, config, iv):
    n = data.n
    if n < 4 * config.k_folds:
        raise DmlError(f"need n >= 4*k_folds = {4 * config.k_folds}, got {n}")
    if iv and data.instrument is None:
        raise DmlError("dataset has no instrument column")
    plan = make_split_plan(n, config.k_folds, config.s_repetitions, config.seed)

    def one(rep):
        labels = _labels_for(plan, rep, data.d)
        z = None
        if iv:
            z = data.instrument[:, 0] if data.instrument.shape[1] == 1 else \
                synthetic_instrument(data, config, labels, rep)
        cf = cross_fit(data, config, labels, rep, z)
        if iv:
            return iv_residual_regression(cf.resid_z, cf.resid_d, cf.resid_y)
        return residual_regression(cf.resid_d, cf.resid_y)

    reps = range(config.s_repetitions)
    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            per_split = list(pool.map(one, reps))
    else:
        per_split = [one(r) for r in reps]
    theta, se = aggregate_splits(per_split, config.aggregation)
    label = f"dml_{'pliv' if iv else 'plm'}[{config.learner_spec_g.method}] K={config.k_folds} " \
            f"S={config.s_repetitions} {config.aggregation}"
    return EstimateSummary.from_normal(theta, se, config.level, n, per_split, label)


def dml_plm(data: Dataset, config: DmlConfig) -> EstimateSummary:
    """Cross-fitted DML estimate of the treatment coefficient in ``y = d*theta + g(x) + u``."""
    return _run(data, config, iv=False)


def dml_pliv(data: Dataset, config: DmlConfig) -> EstimateSummary:
    """DML-IV estimate with cross-fitted residualized instrument.

    With several instrument columns a single synthetic instrument (the
    cross-fitted first-stage prediction of d from instruments and x) is used.
    """
    return _run(data, config, iv=True)
