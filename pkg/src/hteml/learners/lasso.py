"""L1-penalized least squares by cyclic coordinate descent.

The objective on standardized covariates ``z`` is

    (1 / (2 * sum(w))) * sum_i w_i (y_i - b0 - z_i . beta)^2 + lam * ||beta||_1

with weights normalized to mean one. Covariates are scaled to unit
weighted population variance, so a single centered column with
``x'x/n = 1`` has the soft-threshold solution ``sign(b) * max(|b| - lam, 0)``.
"""
from __future__ import annotations

import logging

import numpy as np
from numba import njit

from ..dataset import expand_interactions
from .base import LearnerError, Predictor, check_xy, kfold_labels

logger = logging.getLogger(__name__)


@njit(cache=True, nogil=True)
def _soft(a, t):
    if a > t:
        return a - t
    if a < -t:
        return a + t
    return 0.0


@njit(cache=True, nogil=True)
def _cd_solve(z, r, w, beta, denom, lam, max_iter, tol, active):
    # r holds the current residual y - z beta; updated in place
    n, p = z.shape
    for it in range(max_iter):
        max_step = 0.0
        for j in range(p):
            if not active[j] or denom[j] <= 0.0:
                continue
            rho = 0.0
            for i in range(n):
                rho += w[i] * z[i, j] * r[i]
            rho = rho / n + denom[j] * beta[j]
            new = _soft(rho, lam) / denom[j]
            delta = new - beta[j]
            if delta != 0.0:
                for i in range(n):
                    r[i] -= delta * z[i, j]
                beta[j] = new
                step = abs(delta) * np.sqrt(denom[j])
                if step > max_step:
                    max_step = step
        if max_step < tol:
            return it + 1
    return -1


@njit(cache=True, nogil=True)
def _cd_path(z, r, w, beta, lambdas, max_iter, tol, tss):
    """Warm-started path over ``lambdas``; ``beta`` and residual ``r`` are updated in place."""
    n, p = z.shape
    denom = np.zeros(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += w[i] * z[i, j] * z[i, j]
        denom[j] = s / n
    betas = np.zeros((lambdas.shape[0], p))
    everyone = np.ones(p, dtype=np.bool_)
    ok = True
    saturated = False
    for li in range(lambdas.shape[0]):
        if saturated:
            betas[li] = beta
            continue
        lam = lambdas[li]
        # converge on the active set, then confirm with one full sweep
        for outer in range(max_iter):
            active = beta != 0.0
            if active.any():
                if _cd_solve(z, r, w, beta, denom, lam, max_iter, tol, active) < 0:
                    ok = False
            if _cd_solve(z, r, w, beta, denom, lam, 1, tol, everyone) == 1:
                break
        else:
            ok = False
        betas[li] = beta
        # stop refining once 99.9% of the deviance is explained
        rss = 0.0
        for i in range(n):
            rss += w[i] * r[i] * r[i]
        if rss < 1e-3 * tss:
            saturated = True
    return betas, ok


def _path(z, y, w, lambdas, max_iter, tol):
    beta = np.zeros(z.shape[1])
    return _cd_path(z, y.copy(), w, beta, lambdas, max_iter, tol, float(w @ y**2))


def _prepare(x, y, w):
    w = w * (len(w) / w.sum())
    xm = (w @ x) / len(w)
    xc = x - xm
    scale = np.sqrt((w @ xc**2) / len(w))
    const = scale <= 1e-12 * (1.0 + np.abs(xm))
    scale = np.where(const, 1.0, scale)
    z = np.where(const, 0.0, xc / scale)
    ym = float(w @ y) / len(w)
    return np.ascontiguousarray(z), y - ym, w, xm, scale, ym


def lambda_max(x, y, weights=None) -> float:
    """Smallest penalty at which every slope is zero."""
    x, y, w = check_xy(x, y, weights)
    z, yc, w, *_ = _prepare(x, y, w)
    return float(np.max(np.abs((w * yc) @ z)) / len(yc)) if z.shape[1] else 0.0


class LassoPredictor(Predictor):
    method = "lasso"

    def __init__(self, intercept, slopes, names, lam, interactions, n_features, base_names,
                 cv_curve=None, lambdas=None, std=None):
        self.intercept = float(intercept)
        self.slopes = np.asarray(slopes)
        self.names = list(names)
        self.lam = float(lam)
        self.interactions = interactions
        self.n_features = n_features
        self.base_names = base_names
        self.cv_curve = cv_curve
        self.lambdas = lambdas
        self.coefficients = {"(intercept)": self.intercept}
        self.coefficients.update(zip(self.names, map(float, self.slopes)))

    def design(self, x):
        if self.interactions:
            x, _ = expand_interactions(x, self.base_names)
        return x

    def _predict(self, x):
        return self.intercept + self.design(x) @ self.slopes

    def kkt_violation(self, x, y, weights=None) -> tuple[float, float]:
        """Largest KKT violations on the standardized scale.

        Returns ``(zero_excess, active_residual)``: how far the gradient of
        any zero coefficient exceeds ``lam``, and the largest stationarity
        residual ``|grad_j + lam * sign(beta_j)|`` over active coefficients.
        """
        x, y, w = check_xy(self.design(np.asarray(x, float)), y, weights)
        z, yc, w, xm, scale, ym = _prepare(x, y, w)
        beta = self.slopes * scale
        r = yc - z @ beta
        grad = -(w * r) @ z / len(yc)
        zero = beta == 0.0
        excess = np.max(np.abs(grad[zero]) - self.lam, initial=-np.inf)
        resid = np.max(np.abs(grad[~zero] + self.lam * np.sign(beta[~zero])), initial=0.0)
        return float(max(excess, 0.0)), float(resid)


def _cv_curve(x, y, w, folds, cv_folds, lambdas, max_iter, tol, chunk=10, rise=0.01):
    """Mean held-out MSE along the grid, all folds advanced in lockstep.

    Once the curve has risen ``rise`` above its minimum and the minimum lies
    at least one chunk behind, the remaining (smaller) penalties are skipped
    and scored as +inf.
    """
    states = []
    for f in range(cv_folds):
        tr = folds != f
        zt, yt, wt, xmt, st, ymt = _prepare(x[tr], y[tr], w[tr])
        states.append((zt, yt.copy(), wt, np.zeros(zt.shape[1]), xmt, st, ymt, float(wt @ yt**2)))
    errs = np.full((cv_folds, len(lambdas)), np.inf)
    for lo in range(0, len(lambdas), chunk):
        hi = min(lo + chunk, len(lambdas))
        for f, (zt, r, wt, beta, xmt, st, ymt, tss) in enumerate(states):
            betas, _ = _cd_path(zt, r, wt, beta, lambdas[lo:hi], max_iter, tol, tss)
            slopes = betas / st
            icpt = ymt - slopes @ xmt
            te = folds == f
            pred = icpt[:, None] + slopes @ x[te].T
            errs[f, lo:hi] = ((y[te] - pred) ** 2 * w[te]).sum(axis=1) / w[te].sum()
        curve = errs[:, :hi].mean(axis=0)
        best = int(np.argmin(curve))
        if hi - best > chunk and curve[hi - 1] > (1.0 + rise) * curve[best]:
            break
    return errs.mean(axis=0)


def fit_lasso(x, y, weights=None, *, lam=None, n_lambdas=100, lambda_ratio=None,
              cv_folds=10, interactions=False, names=None, seed=0, max_iter=10_000,
              tol=1e-9) -> LassoPredictor:
    """Fit the lasso; the penalty is chosen by K-fold CV unless ``lam`` is given.

    The CV grid has ``n_lambdas`` log-spaced values from the smallest
    all-zero penalty down to ``lambda_ratio`` times it (default 1e-4, or
    1e-2 when columns outnumber rows).
    """
    x, y, w = check_xy(x, y, weights)
    n_features = x.shape[1]
    base_names = list(names) if names is not None else [f"x{j + 1}" for j in range(n_features)]
    if interactions:
        x, names = expand_interactions(x, base_names)
    else:
        names = base_names
    z, yc, wn, xm, scale, ym = _prepare(x, y, w)
    lmax = float(np.max(np.abs((wn * yc) @ z)) / len(yc)) if z.shape[1] else 0.0
    y_sd = max(float(np.sqrt(np.mean(wn * yc**2))), 1e-300)
    ytol = tol * y_sd

    if lam is not None:
        lambdas = np.array([float(lam)])
        chosen = 0
        cv_curve = None
    elif lmax <= 0.0:
        lambdas = np.array([0.0])
        chosen = 0
        cv_curve = None
    else:
        if lambda_ratio is None:
            lambda_ratio = 1e-4 if x.shape[0] > x.shape[1] else 1e-2
        lambdas = lmax * np.logspace(0.0, np.log10(lambda_ratio), n_lambdas)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        folds = kfold_labels(len(y), cv_folds, rng)
        # CV paths only rank penalties, so a looser tolerance suffices
        cv_curve = _cv_curve(x, y, w, folds, cv_folds, lambdas, max_iter, max(ytol, 1e-7 * y_sd))
        chosen = int(np.argmin(cv_curve))

    betas, ok = _path(z, yc, wn, lambdas[: chosen + 1], max_iter, ytol)
    beta = betas[chosen]
    if not np.all(np.isfinite(beta)):
        raise LearnerError("lasso: non-finite coefficients")
    if not ok:
        logger.warning("lasso: coordinate descent hit max_iter at lam=%g", lambdas[chosen])
    slopes = beta / scale
    intercept = ym - slopes @ xm
    return LassoPredictor(intercept, slopes, names, lambdas[chosen], interactions, n_features,
                          base_names, cv_curve=cv_curve, lambdas=lambdas)


def lasso_path(x, y, lambdas, weights=None, max_iter=10_000, tol=1e-10):
    """Standardized-scale coefficient path for a decreasing penalty grid."""
    x, y, w = check_xy(x, y, weights)
    z, yc, wn, *_ = _prepare(x, y, w)
    lambdas = np.asarray(lambdas, dtype=float)
    betas, _ = _path(z, yc, wn, lambdas, max_iter, tol)
    return betas
