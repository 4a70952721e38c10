"""Ensemble (simplex-weighted average) and Best (lowest holdout loss) learners."""
from __future__ import annotations

import logging

import numpy as np
from scipy.optimize import minimize

from .base import LearnerError, LearnerSpec, Predictor, check_xy

logger = logging.getLogger(__name__)


def simplex_weights(preds, y) -> np.ndarray:
    """Nonnegative weights summing to one minimizing ``||y - preds @ w||^2``.

    ``preds`` has one column per candidate.
    """
    preds = np.asarray(preds, dtype=float)
    m = preds.shape[1]
    if m == 1:
        return np.ones(1)
    gram = preds.T @ preds
    lin = preds.T @ y
    scale = max(float(np.trace(gram)) / m, 1e-300)

    def obj(w):
        return (w @ gram @ w - 2.0 * lin @ w) / scale

    def jac(w):
        return (2.0 * gram @ w - 2.0 * lin) / scale

    res = minimize(obj, np.full(m, 1.0 / m), jac=jac, method="SLSQP",
                   bounds=[(0.0, 1.0)] * m,
                   constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0,
                                 "jac": lambda w: np.ones(m)}],
                   options={"ftol": 1e-14, "maxiter": 500})
    w = np.clip(res.x, 0.0, None)
    return w / w.sum()


class HybridPredictor(Predictor):
    def __init__(self, mode, members, weights, losses, labels, n_features):
        self.method = mode
        self.members = members
        self.weights = np.asarray(weights, dtype=float)
        self.losses = list(losses)
        self.labels = list(labels)
        self.n_features = n_features
        self.oos_loss = float(min(losses)) if mode == "best" else None

    @property
    def chosen(self) -> str:
        return self.labels[int(np.argmax(self.weights))]

    def _predict(self, x):
        out = np.zeros(x.shape[0])
        for wt, m in zip(self.weights, self.members):
            if wt > 0:
                out += wt * m.predict(x)
        return out


def fit_hybrid(specs, mode, x, y, holdout_fraction=0.2, weights=None, seed=0, names=None):
    """Fit candidates on a training part, score them on the holdout, refit on all rows.

    ``mode='best'`` keeps the single lowest-MSE candidate; ``'ensemble'``
    keeps all with simplex least-squares weights from holdout predictions.
    """
    from . import fit_learner

    if mode not in ("ensemble", "best"):
        raise ValueError("mode must be 'ensemble' or 'best'")
    if len(specs) < 2:
        raise ValueError("need at least two candidate specs")
    if not 0.0 < holdout_fraction <= 0.5:
        raise ValueError("holdout fraction must lie in (0, 0.5]")
    x, y, w = check_xy(x, y, weights)
    n = len(y)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    perm = rng.permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n)))
    ho, tr = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])

    ok_specs, preds, losses = [], [], []
    for spec in specs:
        try:
            m = fit_learner(spec, x[tr], y[tr], w[tr], names=names)
        except LearnerError as exc:
            logger.warning("candidate %s failed: %s", spec.method, exc)
            continue
        p = m.predict(x[ho])
        ok_specs.append(spec)
        preds.append(p)
        losses.append(float(np.average((y[ho] - p) ** 2, weights=w[ho])))
    if not ok_specs:
        raise LearnerError(f"{mode}: all candidates failed to fit")

    labels = [s.method for s in ok_specs]
    if mode == "best":
        k = int(np.argmin(losses))
        member = fit_learner(ok_specs[k], x, y, w, names=names)
        wts = np.zeros(len(ok_specs))
        wts[k] = 1.0
        members = [member if j == k else None for j in range(len(ok_specs))]
        return HybridPredictor(mode, members, wts, losses, labels, x.shape[1])

    wts = simplex_weights(np.column_stack(preds), y[ho])
    members = [fit_learner(s, x, y, w, names=names) if wt > 0 else None
               for s, wt in zip(ok_specs, wts)]
    return HybridPredictor(mode, members, wts, losses, labels, x.shape[1])


def member_specs(parent: LearnerSpec) -> list[LearnerSpec]:
    ss = np.random.SeedSequence(parent.seed).generate_state(len(parent.params["members"]))
    out = []
    for k, item in enumerate(parent.params["members"]):
        if isinstance(item, LearnerSpec):
            out.append(item)
        elif isinstance(item, dict):
            out.append(LearnerSpec(item["method"], item.get("hyperparameters", {}),
                                   item.get("cv_folds", parent.cv_folds), item.get("seed", int(ss[k]))))
        else:
            out.append(LearnerSpec(item, {}, parent.cv_folds, int(ss[k])))
    return out
