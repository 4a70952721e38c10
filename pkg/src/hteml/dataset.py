"""Data containers, design-matrix helpers, fold planning and synthetic DGPs.

Everything here is pure given its seed. Arrays stored on a :class:`Dataset`
are marked read-only so a dataset can be shared between workers.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.stats import norm

logger = logging.getLogger(__name__)

MAX_EXPANDED_WIDTH = 10**6

DGP_NAMES = ("plm_nonlinear", "pliv_endogenous", "hte_forest", "hte_null")


class DataError(ValueError):
    """Raised for malformed input data or schema problems."""


def _frozen(a, dtype=float):
    if a is None:
        return None
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Column-oriented table with named causal roles.

    Parameters
    ----------
    y : array (n,)
        Outcome.
    d : array (n,)
        Treatment. Binary for the forest and generic-ML methods.
    x : array (n, p)
        Covariates.
    instrument : array (n, q), optional
        Excluded instruments.
    cluster_id, block_id : int arrays (n,), optional
        Cluster membership and randomization strata.
    x_names : list of str
        Covariate names; defaults to ``x1..xp``.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    instrument: np.ndarray | None = None
    cluster_id: np.ndarray | None = None
    block_id: np.ndarray | None = None
    x_names: tuple[str, ...] = ()
    y_name: str = "y"
    d_name: str = "d"
    instrument_names: tuple[str, ...] = ()
    dropped_rows: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(np.ravel(self.y)))
        object.__setattr__(self, "d", _frozen(np.ravel(self.d)))
        n = self.y.shape[0]
        if self.instrument is not None:
            z = np.asarray(self.instrument, dtype=float)
            if z.ndim == 1:
                z = z[:, None]
            object.__setattr__(self, "instrument", _frozen(z))
        object.__setattr__(self, "cluster_id", _frozen(self.cluster_id, np.int64))
        object.__setattr__(self, "block_id", _frozen(self.block_id, np.int64))

        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j + 1}" for j in range(x.shape[1])))
        else:
            object.__setattr__(self, "x_names", tuple(self.x_names))
        if self.instrument is not None and not self.instrument_names:
            names = tuple(f"z{j + 1}" for j in range(self.instrument.shape[1]))
            object.__setattr__(self, "instrument_names", names)
        else:
            object.__setattr__(self, "instrument_names", tuple(self.instrument_names))

        for name, arr in self._columns():
            if arr.shape[0] != n:
                raise DataError(f"column {name!r} has length {arr.shape[0]}, expected {n}")
            if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                raise DataError(f"column {name!r} contains non-finite values")
        if len(self.x_names) != x.shape[1]:
            raise DataError("x_names does not match the number of covariate columns")
        names = self.column_names
        if len(set(names)) != len(names):
            raise DataError(f"duplicate column names: {names}")

    def _columns(self):
        yield self.y_name, self.y
        yield self.d_name, self.d
        yield "x", self.x
        if self.instrument is not None:
            yield "instrument", self.instrument
        if self.cluster_id is not None:
            yield "cluster_id", self.cluster_id
        if self.block_id is not None:
            yield "block_id", self.block_id

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def column_names(self) -> list[str]:
        return [self.y_name, self.d_name, *self.x_names, *self.instrument_names]

    def require_binary_treatment(self):
        if not np.all((self.d == 0) | (self.d == 1)):
            raise DataError("treatment must be binary {0,1} for this method")

    def column(self, name: str) -> np.ndarray:
        """Look up a column by name (outcome, treatment, covariate or instrument)."""
        if name == self.y_name:
            return self.y
        if name == self.d_name:
            return self.d
        if name in self.x_names:
            return self.x[:, self.x_names.index(name)]
        if name in self.instrument_names:
            return self.instrument[:, self.instrument_names.index(name)]
        raise DataError(f"unknown column {name!r}")

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        take = lambda a: None if a is None else a[rows]  # noqa: E731
        return Dataset(
            y=self.y[rows], d=self.d[rows], x=self.x[rows],
            instrument=take(self.instrument), cluster_id=take(self.cluster_id),
            block_id=take(self.block_id), x_names=self.x_names,
            y_name=self.y_name, d_name=self.d_name,
            instrument_names=self.instrument_names,
        )

    def replace(self, **changes) -> "Dataset":
        fields = dict(
            y=self.y, d=self.d, x=self.x, instrument=self.instrument,
            cluster_id=self.cluster_id, block_id=self.block_id, x_names=self.x_names,
            y_name=self.y_name, d_name=self.d_name,
            instrument_names=self.instrument_names, dropped_rows=self.dropped_rows,
        )
        fields.update(changes)
        return Dataset(**fields)

    def fingerprint(self) -> str:
        """SHA-256 over the raw column bytes and names."""
        h = hashlib.sha256()
        for name, arr in self._columns():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("|".join(self.column_names).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

_SCHEMA_ROLES = ("y", "d", "x", "instrument", "cluster", "block")


def load_csv(path, schema: Mapping[str, object]) -> Dataset:
    """Read a headed CSV file into a :class:`Dataset`.

    ``schema`` maps roles to column names: ``y`` and ``d`` take one name,
    ``x`` and ``instrument`` take a list, ``cluster`` and ``block`` one name
    each. Rows with an empty cell in any mapped column are dropped; the drop
    count is stored on ``Dataset.dropped_rows`` and logged.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    unknown_roles = set(schema) - set(_SCHEMA_ROLES)
    if unknown_roles:
        raise DataError(f"unknown schema roles: {sorted(unknown_roles)}")
    if "y" not in schema or "d" not in schema:
        raise DataError("schema must map both 'y' and 'd'")

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: no header row") from None
        rows = [r for r in reader if r]

    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise DataError(f"duplicate column names: {dupes}")
    index = {h: i for i, h in enumerate(header)}

    def names_for(role):
        val = schema.get(role)
        if val is None:
            return []
        return [val] if isinstance(val, str) else list(val)

    mapped = {role: names_for(role) for role in _SCHEMA_ROLES}
    for role, names in mapped.items():
        for name in names:
            if name not in index:
                raise DataError(f"unknown column {name!r} (role {role!r})")
    used = [c for names in mapped.values() for c in names]

    keep = []
    for r in rows:
        r = r + [""] * (len(header) - len(r))
        if any(r[index[c]].strip() == "" for c in used):
            continue
        keep.append(r)
    dropped = len(rows) - len(keep)
    if dropped:
        logger.warning("%s: dropped %d of %d rows with missing values", path, dropped, len(rows))

    def numeric(cols, dtype=float):
        out = np.empty((len(keep), len(cols)), dtype=dtype)
        for j, c in enumerate(cols):
            k = index[c]
            for i, r in enumerate(keep):
                cell = r[k].strip()
                try:
                    out[i, j] = float(cell) if dtype is float else int(float(cell))
                except ValueError:
                    raise DataError(f"non-numeric value {cell!r} in column {c!r}") from None
        return out

    x_cols = mapped["x"]
    z_cols = mapped["instrument"]
    return Dataset(
        y=numeric(mapped["y"])[:, 0],
        d=numeric(mapped["d"])[:, 0],
        x=numeric(x_cols) if x_cols else np.empty((len(keep), 0)),
        instrument=numeric(z_cols) if z_cols else None,
        cluster_id=numeric(mapped["cluster"], int)[:, 0] if mapped["cluster"] else None,
        block_id=numeric(mapped["block"], int)[:, 0] if mapped["block"] else None,
        x_names=tuple(x_cols),
        y_name=mapped["y"][0],
        d_name=mapped["d"][0],
        instrument_names=tuple(z_cols),
        dropped_rows=dropped,
    )


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------

def expand_interactions(x, names: Sequence[str] | None = None, squares: bool = False):
    """Append all pairwise products ``x_i * x_j`` (i < j) to ``x``.

    Returns ``(matrix, names)``; product columns are named ``"a:b"``.
    With ``squares=True`` the squared terms ``"a:a"`` follow the pairs.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DataError("expand_interactions needs a 2-d matrix with at least one column")
    n, p = x.shape
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(p)]
    width = p + p * (p - 1) // 2 + (p if squares else 0)
    if width > MAX_EXPANDED_WIDTH:
        raise DataError(f"expanded width {width} exceeds {MAX_EXPANDED_WIDTH}")
    out = np.empty((n, width))
    out[:, :p] = x
    out_names = list(names)
    col = p
    for i, j in combinations(range(p), 2):
        out[:, col] = x[:, i] * x[:, j]
        out_names.append(f"{names[i]}:{names[j]}")
        col += 1
    if squares:
        for i in range(p):
            out[:, col] = x[:, i] ** 2
            out_names.append(f"{names[i]}:{names[i]}")
            col += 1
    return out, out_names


class Standardized(NamedTuple):
    values: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    constant: np.ndarray


def standardize(x) -> Standardized:
    """Center columns and scale to unit sample standard deviation.

    Constant columns are centered, given scale 1 and flagged in ``constant``.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    centers = x.mean(axis=0)
    dev = x - centers
    if x.shape[0] > 1:
        scales = np.sqrt((dev**2).sum(axis=0) / (x.shape[0] - 1))
    else:
        scales = np.zeros(x.shape[1])
    constant = np.all(dev == 0.0, axis=0) | (scales == 0.0)
    scales = np.where(constant, 1.0, scales)
    values = np.where(constant, 0.0, dev / scales)
    if squeeze:
        values = values[:, 0]
    return Standardized(values, centers, scales, constant)


# ---------------------------------------------------------------------------
# Fold planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    """Fold labels (0..k-1) for each of ``s_repetitions`` random partitions."""

    n: int
    k_folds: int
    s_repetitions: int
    seed: int
    assignment: np.ndarray = field(repr=False)

    def folds(self, rep: int):
        """Yield ``(train_idx, test_idx)`` for every fold of repetition ``rep``."""
        labels = self.assignment[rep]
        for f in range(self.k_folds):
            test = np.flatnonzero(labels == f)
            train = np.flatnonzero(labels != f)
            yield train, test


def _balanced_labels(n, k, rng):
    labels = np.arange(n) % k
    return rng.permutation(labels)


def make_split_plan(n: int, k: int, s: int = 1, seed: int = 0) -> SplitPlan:
    """Random balanced K-fold partitions, one per repetition.

    Fold sizes differ by at most one; the remainder goes to the lowest fold
    labels before shuffling.
    """
    if k < 2:
        raise ValueError("k_folds must be >= 2")
    if k > n:
        raise ValueError(f"k_folds={k} exceeds n={n}")
    if s < 1:
        raise ValueError("s_repetitions must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(s)
    assignment = np.vstack([_balanced_labels(n, k, np.random.default_rng(ss)) for ss in streams])
    assignment.setflags(write=False)
    return SplitPlan(n=n, k_folds=k, s_repetitions=s, seed=seed, assignment=assignment)


def redraw_repetition(plan: SplitPlan, rep: int, attempt: int) -> np.ndarray:
    """Alternative partition for repetition ``rep`` (used when a fold is degenerate)."""
    ss = np.random.SeedSequence([plan.seed, rep, attempt + 1])
    return _balanced_labels(plan.n, plan.k_folds, np.random.default_rng(ss))


# ---------------------------------------------------------------------------
# Synthetic data-generating processes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DgpSample:
    dataset: Dataset
    true_ate: float
    true_cate: np.ndarray
    dgp_name: str
    seed: int
    propensity: np.ndarray | None = None
    baseline: np.ndarray | None = None


def _toeplitz_normal(rng, n, p, rho):
    if rho == 0.0:
        return rng.standard_normal((n, p))
    cov = rho ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    chol = np.linalg.cholesky(cov)
    return rng.standard_normal((n, p)) @ chol.T


def _col(x, j):
    return x[:, j] if x.shape[1] > j else np.zeros(x.shape[0])


def _check_params(params, allowed):
    bad = set(params) - set(allowed)
    if bad:
        raise ValueError(f"invalid params {sorted(bad)}; allowed: {sorted(allowed)}")
    merged = dict(allowed)
    merged.update(params)
    return merged


def plm_outcome_nuisance(x):
    """Default outcome nuisance ``sin(x1) + x2*x3``."""
    return np.sin(_col(x, 0)) + _col(x, 1) * _col(x, 2)


def generate_dgp(name: str, n: int, p: int, params: Mapping[str, float] | None = None,
                 seed: int = 0) -> DgpSample:
    """Draw a synthetic sample with known treatment effects.

    ``plm_nonlinear``
        ``y = theta*d + g(x) + u``, ``d = m(x) + v`` with
        ``g(x) = g_scale*(sin(x1) + x2*x3)`` and ``m(x) = m_scale*Phi(x1)``.
        Params: theta (0.5), g_scale (1), m_scale (3), sigma_u (1),
        sigma_v (1), rho (0.5, Toeplitz covariate correlation).
    ``pliv_endogenous``
        As above plus ``z = z_x*sin(x2) + e``, ``d = m(x) + pi*z + v`` and
        ``corr(u, v) = corr``. Params: theta (1), corr (0.5), pi (1),
        m_scale (1), g_scale (1), rho (0.5), z_x (0).
    ``hte_forest``
        Binary treatment with constant propensity, baseline
        ``x2 + 0.5*x3`` and effect ``scale*max(x1, 0)`` (``effect=0``) or
        ``ate + scale*x1`` (``effect=1``). Params: scale (1), propensity
        (0.5), sigma (1), effect (0), ate (0).
    ``hte_null``
        Same design with constant effect ``tau`` (0).
    """
    params = dict(params or {})
    if name not in DGP_NAMES:
        raise ValueError(f"unknown DGP {name!r}; choose from {DGP_NAMES}")
    if n < 1 or p < 1:
        raise ValueError("n and p must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    if name == "plm_nonlinear":
        prm = _check_params(params, dict(theta=0.5, g_scale=1.0, m_scale=3.0,
                                         sigma_u=1.0, sigma_v=1.0, rho=0.5))
        x = _toeplitz_normal(rng, n, p, prm["rho"])
        m0 = prm["m_scale"] * norm.cdf(x[:, 0])
        g0 = prm["g_scale"] * plm_outcome_nuisance(x)
        d = m0 + prm["sigma_v"] * rng.standard_normal(n)
        y = prm["theta"] * d + g0 + prm["sigma_u"] * rng.standard_normal(n)
        theta = float(prm["theta"])
        ds = Dataset(y=y, d=d, x=x)
        return DgpSample(ds, theta, np.full(n, theta), name, seed, baseline=g0)

    if name == "pliv_endogenous":
        prm = _check_params(params, dict(theta=1.0, corr=0.5, pi=1.0, m_scale=1.0,
                                         g_scale=1.0, rho=0.5, z_x=0.0))
        if not -1.0 < prm["corr"] < 1.0:
            raise ValueError("corr must lie in (-1, 1)")
        x = _toeplitz_normal(rng, n, p, prm["rho"])
        z = prm["z_x"] * np.sin(_col(x, 1)) + rng.standard_normal(n)
        e = rng.standard_normal((n, 2))
        u = e[:, 0]
        v = prm["corr"] * e[:, 0] + math.sqrt(1.0 - prm["corr"] ** 2) * e[:, 1]
        d = prm["m_scale"] * norm.cdf(x[:, 0]) + prm["pi"] * z + v
        g0 = prm["g_scale"] * plm_outcome_nuisance(x)
        y = prm["theta"] * d + g0 + u
        theta = float(prm["theta"])
        ds = Dataset(y=y, d=d, x=x, instrument=z[:, None])
        return DgpSample(ds, theta, np.full(n, theta), name, seed, baseline=g0)

    if name == "hte_forest":
        prm = _check_params(params, dict(scale=1.0, propensity=0.5, sigma=1.0, effect=0, ate=0.0))
    else:
        prm = _check_params(params, dict(tau=0.0, propensity=0.5, sigma=1.0))
    if not 0.0 < prm["propensity"] < 1.0:
        raise ValueError("propensity must lie in (0, 1)")
    x = rng.standard_normal((n, p))
    d = (rng.random(n) < prm["propensity"]).astype(float)
    baseline = _col(x, 1) + 0.5 * _col(x, 2)
    if name == "hte_forest":
        if prm["effect"] == 0:
            tau = prm["scale"] * np.maximum(x[:, 0], 0.0)
        elif prm["effect"] == 1:
            tau = prm["ate"] + prm["scale"] * x[:, 0]
        else:
            raise ValueError("effect must be 0 (hinge) or 1 (linear)")
    else:
        tau = np.full(n, float(prm["tau"]))
    y = baseline + d * tau + prm["sigma"] * rng.standard_normal(n)
    ds = Dataset(y=y, d=d, x=x)
    true_ate = float(np.mean(tau))
    return DgpSample(ds, true_ate, tau, name, seed,
                     propensity=np.full(n, prm["propensity"]), baseline=baseline)
