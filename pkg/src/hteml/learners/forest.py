"""Regression forests: averages of randomized CART trees on resamples."""
from __future__ import annotations

import numpy as np

from ._kernels import argsort_columns, grow_forest, predict_forest
from .base import Predictor, check_xy


class ForestPredictor(Predictor):
    """Fitted regression forest.

    ``inbag[b, i]`` counts how often training row ``i`` entered tree ``b``,
    which is what out-of-bag prediction needs.
    """

    method = "forest"

    def __init__(self, offsets, feature, threshold, left, right, value, inbag, n_features):
        self.offsets = offsets
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value
        self.inbag = inbag
        self.n_features = n_features

    @property
    def n_trees(self):
        return len(self.offsets) - 1

    def tree_predictions(self, x):
        x = np.ascontiguousarray(np.asarray(x, dtype=float))
        return predict_forest(x, self.offsets, self.feature, self.threshold, self.left,
                              self.right, self.value)

    def _predict(self, x):
        return self.tree_predictions(x).mean(axis=0)

    def predict_oob(self, x_train):
        """Out-of-bag predictions for the training rows (NaN if never out of bag)."""
        preds = self.tree_predictions(x_train)
        oob = self.inbag == 0
        cnt = oob.sum(axis=0)
        total = np.where(oob, preds, 0.0).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(cnt > 0, total / cnt, np.nan)


def fit_forest(x, y, weights=None, *, n_trees=1000, min_leaf=5, max_depth=60, mtry=None,
               sample_fraction=1.0, replace=True, seed=0) -> ForestPredictor:
    """Fit a random forest.

    With ``replace=True`` each tree sees a bootstrap sample of size
    ``sample_fraction * n``; otherwise a subsample drawn without replacement.
    ``mtry`` defaults to ``max(1, p // 3)``.
    """
    x, y, w = check_xy(x, y, weights)
    n, p = x.shape
    # grow on the centered target so a location shift only moves leaf values
    y_mean = float(np.average(y, weights=w))
    yc = y - y_mean
    mtry = max(1, p // 3) if mtry is None else int(min(max(mtry, 1), p))
    size = max(1, int(round(sample_fraction * n)))
    if not replace:
        size = min(size, n)
    tree_seeds = np.random.SeedSequence(seed).generate_state(n_trees, dtype=np.uint32)
    offsets, feature, threshold, left, right, value, inbag = grow_forest(
        x, yc, w, tree_seeds.astype(np.int64), size, replace, max_depth, min_leaf, mtry,
        argsort_columns(x))
    return ForestPredictor(offsets, feature, threshold, left, right, value + y_mean,
                           inbag=inbag, n_features=p)
