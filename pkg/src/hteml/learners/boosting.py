"""Stagewise least-squares boosting of shallow regression trees."""
from __future__ import annotations

import numpy as np

from ._kernels import argsort_columns, grow_tree, predict_forest, predict_tree
from .base import Predictor, check_xy


class BoostingPredictor(Predictor):
    method = "boosting"

    def __init__(self, init, shrinkage, trees, depth, n_features, train_mse=None):
        self.init = float(init)
        self.shrinkage = shrinkage
        self.depth = depth
        self.n_features = n_features
        self.train_mse = train_mse
        offsets = np.zeros(len(trees) + 1, dtype=np.int64)
        for b, t in enumerate(trees):
            offsets[b + 1] = offsets[b] + len(t[0])
        self._arrays = [np.concatenate([t[k] for t in trees]) if trees else np.zeros(0)
                        for k in range(5)]
        self._offsets = offsets

    def _predict(self, x):
        if len(self._offsets) == 1:
            return np.full(x.shape[0], self.init)
        f, th, l, r, v = self._arrays
        per_tree = predict_forest(x, self._offsets, f, th, l, r, v)
        return self.init + self.shrinkage * per_tree.sum(axis=0)


def _boost(x, y, w, n_trees, shrinkage, depth, min_leaf, bag_fraction, seed):
    n, p = x.shape
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    tree_seeds = np.random.SeedSequence([seed, 1]).generate_state(n_trees, dtype=np.uint32)
    init = float(np.average(y, weights=w))
    f = np.full(n, init)
    xorder = argsort_columns(x)
    trees, mse = [], []
    bag = max(2 * min_leaf, int(round(bag_fraction * n)))
    for b in range(n_trees):
        rows = np.arange(n) if bag >= n else rng.choice(n, bag, replace=False)
        resid = y - f
        t = grow_tree(x, resid, w, rows.astype(np.int64), depth, min_leaf, 2, p, int(tree_seeds[b]),
                      xorder)
        trees.append(t[:5])
        f += shrinkage * predict_tree(x, *t[:5])
        mse.append(float(np.average((y - f) ** 2, weights=w)))
    return init, trees, np.array(mse)


def fit_boosting(x, y, weights=None, *, n_trees=1000, shrinkage=0.01, depth=None,
                 depths=(1, 2, 3, 4), min_leaf=1, bag_fraction=0.5, holdout=0.2, seed=0):
    """Boosted regression trees.

    When ``depth`` is None the interaction depth is chosen from ``depths`` by
    holdout MSE, then the model is refit on all rows.
    """
    x, y, w = check_xy(x, y, weights)
    n = len(y)
    if depth is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        perm = rng.permutation(n)
        n_hold = max(1, int(round(holdout * n)))
        ho, tr = perm[:n_hold], perm[n_hold:]
        losses = []
        for dep in depths:
            init, trees, _ = _boost(x[tr], y[tr], w[tr], n_trees, shrinkage, dep, min_leaf,
                                       bag_fraction, seed)
            model = BoostingPredictor(init, shrinkage, trees, dep, x.shape[1])
            pred = model.predict(x[ho])
            losses.append(float(np.average((y[ho] - pred) ** 2, weights=w[ho])))
        depth = int(depths[int(np.argmin(losses))])
    init, trees, mse = _boost(x, y, w, n_trees, shrinkage, depth, min_leaf, bag_fraction, seed)
    return BoostingPredictor(init, shrinkage, trees, depth, x.shape[1], train_mse=mse)
