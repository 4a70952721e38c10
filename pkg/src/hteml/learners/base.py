from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

METHODS = ("lasso", "tree", "forest", "boosting", "neural_net", "ensemble", "best")

# Tuning defaults follow the appendix of the applied study where it gives
# values; everything else is a documented library choice.
DEFAULTS: dict[str, dict[str, Any]] = {
    "lasso": {"n_lambdas": 100, "lambda_ratio": None, "lam": None, "interactions": False,
              "max_iter": 10_000, "tol": 1e-9},
    "tree": {"min_leaf": 5, "max_depth": 30, "prune": True},
    "forest": {"n_trees": 1000, "min_leaf": 5, "max_depth": 60, "mtry": None,
               "sample_fraction": 1.0, "replace": True},
    "boosting": {"n_trees": 1000, "shrinkage": 0.01, "depth": None, "depths": (1, 2, 3, 4),
                 "min_leaf": 1, "bag_fraction": 0.5, "holdout": 0.2},
    "neural_net": {"hidden": 2, "decay": 0.01, "max_iter": 5000, "step": 0.5, "tol": 1e-10,
                   "decay_grid": None, "hidden_grid": None},
    "ensemble": {"members": ("lasso", "boosting", "forest", "neural_net"), "holdout": 0.2},
    "best": {"members": ("lasso", "tree", "boosting", "forest", "neural_net"), "holdout": 0.2},
}


class LearnerError(RuntimeError):
    """Learner failed to fit (non-finite loss, invalid input)."""


@dataclass(frozen=True)
class LearnerSpec:
    """Which learner to fit, with validated hyperparameters.

    Unknown hyperparameter keys are rejected; missing ones take the
    per-method defaults in :data:`DEFAULTS`.
    """

    method: str
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)
    cv_folds: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown learner method {self.method!r}; choose from {METHODS}")
        extra = set(self.hyperparameters) - set(DEFAULTS[self.method])
        if extra:
            raise ValueError(f"unknown hyperparameters for {self.method}: {sorted(extra)}")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        hp = self.params
        if self.method in ("forest", "boosting") and hp["n_trees"] < 1:
            raise ValueError("n_trees must be >= 1")
        if self.method == "neural_net":
            if hp["decay"] < 0:
                raise ValueError("decay must be >= 0")
            if hp["hidden"] < 1:
                raise ValueError("hidden must be >= 1")
        if self.method == "boosting" and not 0 < hp["bag_fraction"] <= 1:
            raise ValueError("bag_fraction must lie in (0, 1]")
        if self.method in ("tree", "forest", "boosting") and hp["min_leaf"] < 1:
            raise ValueError("min_leaf must be >= 1")

    @property
    def params(self) -> dict[str, Any]:
        merged = dict(DEFAULTS[self.method])
        merged.update(self.hyperparameters)
        return merged

    def with_seed(self, seed: int) -> "LearnerSpec":
        return LearnerSpec(self.method, dict(self.hyperparameters), self.cv_folds, seed)

    def to_dict(self) -> dict:
        hp = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.hyperparameters.items()}
        return {"method": self.method, "hyperparameters": hp,
                "cv_folds": self.cv_folds, "seed": self.seed}


class Predictor:
    """A fitted learner.

    Subclasses implement ``_predict``. ``coefficients`` is set by linear
    learners only; ``oos_loss`` by learners that hold out validation data.
    """

    method: str = "base"
    coefficients: dict[str, float] | None = None
    oos_loss: float | None = None
    n_features: int = 0

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} columns, got {x.shape[1]}")
        return self._predict(np.ascontiguousarray(x))

    def _predict(self, x):  # pragma: no cover - abstract
        raise NotImplementedError


class ConstantPredictor(Predictor):
    method = "constant"

    def __init__(self, value: float, n_features: int):
        self.value = float(value)
        self.n_features = n_features

    def _predict(self, x):
        return np.full(x.shape[0], self.value)


def evaluate_oos(predictor: Predictor, x_holdout, y_holdout) -> float:
    """Mean squared prediction error on a holdout sample."""
    y_holdout = np.asarray(y_holdout, dtype=float).ravel()
    x_holdout = np.asarray(x_holdout, dtype=float)
    if x_holdout.ndim == 1:
        x_holdout = x_holdout[:, None]
    if y_holdout.size == 0:
        raise ValueError("holdout sample is empty")
    if x_holdout.shape[0] != y_holdout.size:
        raise ValueError("holdout x and y lengths differ")
    if x_holdout.shape[1] != predictor.n_features:
        raise ValueError(
            f"width mismatch: predictor expects {predictor.n_features}, holdout has {x_holdout.shape[1]}"
        )
    resid = y_holdout - predictor.predict(x_holdout)
    return float(np.mean(resid**2))


def kfold_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def check_xy(x, y, weights=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != y.shape or np.any(w < 0):
            raise ValueError("weights must be nonnegative with one entry per row")
    return np.ascontiguousarray(x), y, w
