"""CART regression trees with cross-validated cost-complexity pruning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import LEAF, argsort_columns, grow_tree, predict_tree
from .base import Predictor, check_xy, kfold_labels


@dataclass
class TreeArrays:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_node: np.ndarray
    w_node: np.ndarray
    sse: np.ndarray
    depth: np.ndarray

    @classmethod
    def grow(cls, x, y, w, rows=None, *, max_depth=30, min_leaf=5, min_split=2, mtry=None, seed=0):
        if rows is None:
            rows = np.arange(len(y), dtype=np.int64)
        mtry = x.shape[1] if mtry is None else mtry
        y_mean = float(np.average(y[rows], weights=w[rows]))
        arrs = list(grow_tree(x, y - y_mean, w, rows.astype(np.int64), max_depth, min_leaf,
                              min_split, mtry, seed, argsort_columns(x)))
        arrs[4] = arrs[4] + y_mean
        return cls(*arrs)

    def predict(self, x, collapsed=None):
        feature = self.feature
        if collapsed is not None:
            feature = np.where(collapsed, LEAF, feature)
        return predict_tree(x, feature, self.threshold, self.left, self.right, self.value)

    @property
    def n_leaves(self):
        return int(np.sum(self.feature == LEAF))


def pruning_sequence(tree: TreeArrays):
    """Weakest-link pruning.

    Returns ``(alphas, masks)``: the increasing complexity thresholds and,
    for each, a boolean mask of internal nodes collapsed into leaves.
    """
    internal = tree.feature != LEAF
    m = len(tree.feature)
    collapsed = np.zeros(m, dtype=bool)
    alphas = [0.0]
    masks = [collapsed.copy()]
    # children always have larger indices than their parent
    while True:
        risk = tree.sse.copy()
        leaves = np.ones(m)
        for t in range(m - 1, -1, -1):
            if internal[t] and not collapsed[t]:
                risk[t] = risk[tree.left[t]] + risk[tree.right[t]]
                leaves[t] = leaves[tree.left[t]] + leaves[tree.right[t]]
        live = np.zeros(m, dtype=bool)
        live[0] = True
        for t in range(m):
            if live[t] and internal[t] and not collapsed[t]:
                live[tree.left[t]] = True
                live[tree.right[t]] = True
        cand = live & internal & ~collapsed
        if not cand.any():
            break
        g = np.full(m, np.inf)
        g[cand] = (tree.sse[cand] - risk[cand]) / (leaves[cand] - 1.0)
        gmin = g.min()
        collapsed |= cand & (g <= gmin + 1e-12 * (1.0 + abs(gmin)))
        alphas.append(max(gmin, 0.0))
        masks.append(collapsed.copy())
    return np.array(alphas), masks


def prune_at(tree: TreeArrays, alphas, masks, alpha):
    k = int(np.searchsorted(alphas, alpha, side="right") - 1)
    return masks[max(k, 0)]


class TreePredictor(Predictor):
    method = "tree"

    def __init__(self, tree: TreeArrays, collapsed, alpha, n_features):
        self.tree = tree
        self.collapsed = collapsed
        self.alpha = alpha
        self.n_features = n_features

    def _predict(self, x):
        return self.tree.predict(x, self.collapsed)

    @property
    def n_leaves(self):
        live = np.zeros(len(self.collapsed), dtype=bool)
        live[0] = True
        leaves = 0
        for t in range(len(live)):
            if not live[t]:
                continue
            if self.tree.feature[t] == LEAF or self.collapsed[t]:
                leaves += 1
            else:
                live[self.tree.left[t]] = True
                live[self.tree.right[t]] = True
        return leaves


def fit_tree(x, y, weights=None, *, min_leaf=5, max_depth=30, prune=True, cv_folds=10, seed=0):
    """Grow a full CART tree and prune it at the CV-selected complexity."""
    x, y, w = check_xy(x, y, weights)
    full = TreeArrays.grow(x, y, w, max_depth=max_depth, min_leaf=min_leaf, seed=seed)
    alphas, masks = pruning_sequence(full)
    if not prune or len(alphas) == 1:
        return TreePredictor(full, masks[0], 0.0, x.shape[1])

    # geometric midpoints of the full-data sequence, as representative values
    mids = np.sqrt(alphas[:-1] * alphas[1:])
    mids = np.append(mids, alphas[-1] * 2.0 + 1e-300)
    mids[0] = 0.0
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    folds = kfold_labels(len(y), cv_folds, rng)
    err = np.zeros(len(mids))
    for f in range(cv_folds):
        tr = np.flatnonzero(folds != f)
        te = folds == f
        sub = TreeArrays.grow(x, y, w, tr, max_depth=max_depth, min_leaf=min_leaf, seed=seed + f + 1)
        a_f, m_f = pruning_sequence(sub)
        for k, a in enumerate(mids):
            pred = sub.predict(x[te], prune_at(sub, a_f, m_f, a))
            err[k] += np.sum(w[te] * (y[te] - pred) ** 2)
    k = int(np.argmin(err))
    return TreePredictor(full, masks[k], float(alphas[k]), x.shape[1])
