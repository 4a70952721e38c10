"""Weighted least squares with classical, HC1 and CR1 covariance estimates."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ..summary import EstimateSummary

VARIANCE_MODES = ("homoskedastic", "hc_robust", "cluster_robust")


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design is rank deficient; collinear columns: {self.columns}")


@dataclass
class WolsFit:
    coefficients: dict[str, float]
    vcov: np.ndarray
    n: int
    variance_mode: str
    names: list[str]
    residuals: np.ndarray = field(repr=False, default=None)
    n_clusters: int | None = None
    warnings: list[str] = field(default_factory=list)

    def index(self, name) -> int:
        return self.names.index(name)

    def se(self, name) -> float:
        j = self.index(name)
        return float(np.sqrt(max(self.vcov[j, j], 0.0)))

    def summary(self, name, level=0.95, label="") -> EstimateSummary:
        return EstimateSummary.from_normal(self.coefficients[name], self.se(name), level, self.n,
                                           method_label=label or name)

    def contrast(self, weights: dict[str, float], level=0.95, label="") -> EstimateSummary:
        """Inference on a linear combination ``sum_k c_k * beta_k``."""
        c = np.zeros(len(self.names))
        for k, v in weights.items():
            c[self.index(k)] = v
        beta = np.array([self.coefficients[k] for k in self.names])
        var = float(c @ self.vcov @ c)
        return EstimateSummary.from_normal(float(c @ beta), np.sqrt(max(var, 0.0)), level, self.n,
                                           method_label=label)


def collinear_columns(x, names, tol=1e-10):
    """Columns that add no rank when appended left to right."""
    bad = []
    kept = []
    scale = np.linalg.norm(x, axis=0)
    for j in range(x.shape[1]):
        if scale[j] == 0.0:
            bad.append(names[j])
            continue
        trial = kept + [j]
        s = np.linalg.svd(x[:, trial] / scale[trial], compute_uv=False)
        if s[-1] <= tol * s[0]:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def weighted_ols(x, y, weights=None, variance_mode="hc_robust", cluster_id=None,
                 names=None) -> WolsFit:
    """Solve ``min_b sum_i w_i (y_i - x_i b)^2``.

    ``x`` must already contain an intercept column if one is wanted.
    Cluster-robust variance sums weighted score outer products within
    clusters and applies ``G/(G-1) * (n-1)/(n-k)``.
    """
    if variance_mode not in VARIANCE_MODES:
        raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float).ravel()
    n, k = x.shape
    names = list(names) if names is not None else [f"b{j}" for j in range(k)]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    if (variance_mode == "cluster_robust") != (cluster_id is not None):
        raise ValueError("cluster_id is required exactly when variance_mode='cluster_robust'")

    sw = np.sqrt(w)
    xw = x * sw[:, None]
    yw = y * sw
    q, r, piv = scipy.linalg.qr(xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if k == 0 or n < k or diag.min() <= 1e-10 * diag.max():
        raise RankDeficiencyError(collinear_columns(xw, names))
    beta = np.empty(k)
    beta[piv] = scipy.linalg.solve_triangular(r, q.T @ yw)
    resid = y - x @ beta
    rinv = scipy.linalg.solve_triangular(r, np.eye(k))
    bread = np.empty((k, k))
    bread[np.ix_(piv, piv)] = rinv @ rinv.T

    notes = []
    n_clusters = None
    if variance_mode == "homoskedastic":
        sigma2 = float(w @ resid**2) / (n - k) if n > k else np.nan
        vcov = sigma2 * bread
    else:
        scores = x * (w * resid)[:, None]
        if variance_mode == "hc_robust":
            meat = scores.T @ scores
            factor = n / (n - k) if n > k else np.nan
        else:
            cluster_id = np.asarray(cluster_id).ravel()
            labels, inv = np.unique(cluster_id, return_inverse=True)
            g = len(labels)
            n_clusters = g
            sums = np.zeros((g, k))
            np.add.at(sums, inv, scores)
            meat = sums.T @ sums
            factor = g / (g - 1) * (n - 1) / (n - k) if g > 1 and n > k else np.nan
            if g < k:
                notes.append(f"only {g} clusters for {k} coefficients")
                warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
        vcov = factor * bread @ meat @ bread
    vcov = 0.5 * (vcov + vcov.T)
    return WolsFit(dict(zip(names, map(float, beta))), vcov, n, variance_mode, names,
                   residuals=resid, n_clusters=n_clusters, warnings=notes)
