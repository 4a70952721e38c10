"""In-repo supervised learners used for nuisance functions and proxies."""
from __future__ import annotations

import numpy as np

from .base import (DEFAULTS, METHODS, ConstantPredictor, LearnerError, LearnerSpec, Predictor,
                   check_xy, evaluate_oos)
from .boosting import BoostingPredictor, fit_boosting
from .forest import ForestPredictor, fit_forest
from .hybrid import HybridPredictor, fit_hybrid, member_specs, simplex_weights
from .lasso import LassoPredictor, fit_lasso, lambda_max, lasso_path
from .neural_net import NeuralNetPredictor, fit_neural_net
from .tree import TreePredictor, fit_tree
from .wols import RankDeficiencyError, WolsFit, weighted_ols

__all__ = [
    "METHODS", "DEFAULTS", "LearnerSpec", "Predictor", "LearnerError", "ConstantPredictor",
    "fit_learner", "evaluate_oos", "fit_hybrid", "simplex_weights", "weighted_ols", "WolsFit",
    "RankDeficiencyError", "fit_lasso", "lasso_path", "lambda_max", "fit_tree", "fit_forest",
    "fit_boosting", "fit_neural_net", "LassoPredictor", "TreePredictor", "ForestPredictor",
    "BoostingPredictor", "NeuralNetPredictor", "HybridPredictor",
]


def fit_learner(spec: LearnerSpec, x, y, weights=None, names=None) -> Predictor:
    """Fit the learner described by ``spec``.

    A constant target short-circuits to a constant predictor for every
    method, so all methods predict exactly ``c`` when ``y == c``.
    """
    x, y, w = check_xy(x, y, weights)
    if len(y) == 0:
        raise LearnerError(f"{spec.method}: empty training sample")
    if not np.all(np.isfinite(y)):
        raise LearnerError(f"{spec.method}: non-finite target")
    if np.all(y == y[0]):
        return ConstantPredictor(y[0], x.shape[1])
    hp = spec.params
    cv = spec.cv_folds
    if spec.method in ("lasso", "tree") and len(y) < 2 * cv:
        cv = max(2, len(y) // 2)
    seed = spec.seed
    if spec.method == "lasso":
        return fit_lasso(x, y, w, lam=hp["lam"], n_lambdas=hp["n_lambdas"],
                         lambda_ratio=hp["lambda_ratio"], cv_folds=cv,
                         interactions=hp["interactions"], names=names, seed=seed,
                         max_iter=hp["max_iter"], tol=hp["tol"])
    if spec.method == "tree":
        return fit_tree(x, y, w, min_leaf=hp["min_leaf"], max_depth=hp["max_depth"],
                        prune=hp["prune"], cv_folds=cv, seed=seed)
    if spec.method == "forest":
        return fit_forest(x, y, w, n_trees=hp["n_trees"], min_leaf=hp["min_leaf"],
                          max_depth=hp["max_depth"], mtry=hp["mtry"],
                          sample_fraction=hp["sample_fraction"], replace=hp["replace"], seed=seed)
    if spec.method == "boosting":
        return fit_boosting(x, y, w, n_trees=hp["n_trees"], shrinkage=hp["shrinkage"],
                            depth=hp["depth"], depths=tuple(hp["depths"]), min_leaf=hp["min_leaf"],
                            bag_fraction=hp["bag_fraction"], holdout=hp["holdout"], seed=seed)
    if spec.method == "neural_net":
        return fit_neural_net(x, y, w, hidden=hp["hidden"], decay=hp["decay"],
                              max_iter=hp["max_iter"], step=hp["step"], tol=hp["tol"],
                              decay_grid=hp["decay_grid"], hidden_grid=hp["hidden_grid"],
                              cv_folds=cv, seed=seed)
    return fit_hybrid(member_specs(spec), spec.method, x, y, hp["holdout"], w, seed, names)
