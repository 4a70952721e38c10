"""Numba kernels for weighted least-squares regression trees.

Trees are stored as parallel node arrays. Leaves have ``feature == -1``.
Each node records weighted size and weighted SSE so cost-complexity pruning
can run on the grown tree without revisiting the data.
"""
import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True, nogil=True)
def _sample_features(p, mtry, buf):
    # partial Fisher-Yates on buf[0:p]
    for j in range(p):
        buf[j] = j
    for j in range(mtry):
        r = j + np.random.randint(p - j)
        t = buf[j]
        buf[j] = buf[r]
        buf[r] = t


@njit(cache=True, nogil=True)
def argsort_columns(X):
    """Row indices of ``X`` sorted by each column, shape ``(p, N)``."""
    N, p = X.shape
    out = np.empty((p, N), dtype=np.int64)
    for f in range(p):
        out[f] = np.argsort(X[:, f], kind="mergesort")
    return out


@njit(cache=True, nogil=True)
def presort(xorder, rows, n_total):
    """Per-feature orderings of sample positions, derived from a global sort.

    ``rows`` may contain repeats; every copy gets its own position.
    """
    n = rows.shape[0]
    p = xorder.shape[0]
    counts = np.zeros(n_total + 1, dtype=np.int64)
    for i in range(n):
        counts[rows[i] + 1] += 1
    for r in range(n_total):
        counts[r + 1] += counts[r]
    pos = np.empty(n, dtype=np.int64)
    fill = counts[:n_total].copy()
    for i in range(n):
        pos[fill[rows[i]]] = i
        fill[rows[i]] += 1
    order = np.empty((p, n), dtype=np.int64)
    for f in range(p):
        k = 0
        for j in range(n_total):
            r = xorder[f, j]
            for c in range(counts[r], counts[r + 1]):
                order[f, k] = pos[c]
                k += 1
    return order


@njit(cache=True, nogil=True)
def partition_orders(order, s, e, goes_left, buf):
    """Stable partition of every feature's ordering within ``[s, e)``."""
    p = order.shape[0]
    for f in range(p):
        nl = 0
        nr = 0
        # branch-free: the goes_left pattern is effectively random
        for i in range(s, e):
            q = order[f, i]
            gl = goes_left[q]
            order[f, s + nl] = q
            buf[nr] = q
            nl += gl
            nr += 1 - gl
        for k in range(nr):
            order[f, s + nl + k] = buf[k]


SMALL_NODE = 32


@njit(cache=True, nogil=True)
def _sort_small(X, rows, idx, s, e, f, out, vals):
    # insertion sort of node positions by feature f (nodes are small here)
    m = e - s
    for k in range(m):
        q = idx[s + k]
        v = X[rows[q], f]
        j = k - 1
        while j >= 0 and vals[j] > v:
            vals[j + 1] = vals[j]
            out[j + 1] = out[j]
            j -= 1
        vals[j + 1] = v
        out[j + 1] = q


@njit(cache=True, nogil=True)
def _grow_into(X, y, w, rows, max_depth, min_leaf, min_split, mtry, xorder, o,
               feature, threshold, left, right, value, n_node, w_node, sse_node, depth):
    """Grow one tree into the output arrays starting at offset ``o``.

    Child indices are local to the tree. Returns the node count.
    Large nodes scan presorted orderings, which are partitioned for every
    feature at each split; nodes with at most ``SMALL_NODE`` rows instead
    sort just the sampled features.
    """
    n = rows.shape[0]
    p = X.shape[1]
    cap = 2 * n + 1
    starts = np.empty(cap, dtype=np.int64)
    ends = np.empty(cap, dtype=np.int64)
    yy = np.empty(n)
    ww = np.empty(n)
    for i in range(n):
        yy[i] = y[rows[i]]
        ww[i] = w[rows[i]]
    presorted = n > SMALL_NODE
    if presorted:
        order = presort(xorder, rows, X.shape[0])
    else:
        order = np.empty((p, 1), dtype=np.int64)
    idx = np.arange(n)
    goes_left = np.zeros(n, dtype=np.bool_)
    buf = np.empty(n, dtype=np.int64)
    feats = np.empty(p, dtype=np.int64)
    sorted_pos = np.empty(SMALL_NODE + 1, dtype=np.int64)
    sorted_val = np.empty(SMALL_NODE + 1)

    stack = np.empty(cap, dtype=np.int64)
    n_nodes = 1
    starts[0] = 0
    ends[0] = n
    depth[o] = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        g = o + node
        s = starts[node]
        e = ends[node]
        feature[g] = LEAF
        threshold[g] = 0.0
        left[g] = -1
        right[g] = -1
        sw = 0.0
        swy = 0.0
        swyy = 0.0
        for i in range(s, e):
            q = idx[i]
            sw += ww[q]
            swy += ww[q] * yy[q]
            swyy += ww[q] * yy[q] * yy[q]
        cnt = e - s
        mean = swy / sw if sw > 0 else 0.0
        sse = swyy - swy * mean
        if sse < 0.0:
            sse = 0.0
        value[g] = mean
        n_node[g] = cnt
        w_node[g] = sw
        sse_node[g] = sse
        if cnt < min_split or cnt < 2 * min_leaf or depth[g] >= max_depth or sse <= 1e-12 * (1.0 + swyy):
            continue

        small = cnt <= SMALL_NODE
        best_gain = 1e-12 * (1.0 + sse)
        best_f = -1
        best_t = 0.0
        base = swy * swy / sw
        _sample_features(p, mtry, feats)
        for fi in range(mtry):
            f = feats[fi]
            if small:
                _sort_small(X, rows, idx, s, e, f, sorted_pos, sorted_val)
            lw = 0.0
            lwy = 0.0
            for k in range(cnt - 1):
                if small:
                    q = sorted_pos[k]
                    v0 = sorted_val[k]
                    v1 = sorted_val[k + 1]
                else:
                    q = order[f, s + k]
                    v0 = X[rows[q], f]
                    v1 = X[rows[order[f, s + k + 1]], f]
                lw += ww[q]
                lwy += ww[q] * yy[q]
                nl = k + 1
                if nl < min_leaf:
                    continue
                if cnt - nl < min_leaf:
                    break
                if v1 <= v0:
                    continue
                rw = sw - lw
                if lw <= 0.0 or rw <= 0.0:
                    continue
                rwy = swy - lwy
                gain = lwy * lwy / lw + rwy * rwy / rw - base
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_t = 0.5 * (v0 + v1)
                    if best_t >= v1:
                        best_t = v0
        if best_f < 0:
            continue

        nl = 0
        nr = 0
        for i in range(s, e):
            q = idx[i]
            gl = X[rows[q], best_f] <= best_t
            goes_left[q] = gl
            if gl:
                idx[s + nl] = q
                nl += 1
            else:
                buf[nr] = q
                nr += 1
        for k in range(nr):
            idx[s + nl + k] = buf[k]
        if not small and (nl > SMALL_NODE or nr > SMALL_NODE):
            partition_orders(order, s, e, goes_left, buf)
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[g] = best_f
        threshold[g] = best_t
        left[g] = lc
        right[g] = rc
        starts[lc] = s
        ends[lc] = s + nl
        starts[rc] = s + nl
        ends[rc] = e
        depth[o + lc] = depth[g] + 1
        depth[o + rc] = depth[g] + 1
        stack[sp] = rc
        sp += 1
        stack[sp] = lc
        sp += 1
    return n_nodes


@njit(cache=True, nogil=True)
def grow_tree(X, y, w, rows, max_depth, min_leaf, min_split, mtry, seed, xorder):
    """Grow a CART tree on ``rows`` by greedy weighted-SSE reduction.

    ``rows`` may repeat (bootstrap); ``xorder`` is ``argsort_columns(X)``.
    Returns node arrays ``(feature, threshold, left, right, value, n_node,
    w_node, sse_node, depth)`` trimmed to the node count.
    """
    np.random.seed(seed)
    cap = 2 * rows.shape[0] + 1
    feature = np.empty(cap, dtype=np.int64)
    threshold = np.empty(cap)
    left = np.empty(cap, dtype=np.int64)
    right = np.empty(cap, dtype=np.int64)
    value = np.empty(cap)
    n_node = np.empty(cap, dtype=np.int64)
    w_node = np.empty(cap)
    sse_node = np.empty(cap)
    depth = np.empty(cap, dtype=np.int64)
    m = _grow_into(X, y, w, rows, max_depth, min_leaf, min_split, mtry, xorder, 0,
                   feature, threshold, left, right, value, n_node, w_node, sse_node, depth)
    return (feature[:m].copy(), threshold[:m].copy(), left[:m].copy(), right[:m].copy(),
            value[:m].copy(), n_node[:m].copy(), w_node[:m].copy(), sse_node[:m].copy(),
            depth[:m].copy())


@njit(cache=True, nogil=True)
def grow_forest(X, y, w, seeds, size, replace, max_depth, min_leaf, mtry, xorder):
    """Grow ``len(seeds)`` trees on bootstrap samples or subsamples of size ``size``.

    Tree ``b`` draws its rows and features from ``np.random.seed(seeds[b])``.
    Returns concatenated node arrays ``(offsets, feature, threshold, left,
    right, value)`` and the in-bag count matrix.
    """
    n = X.shape[0]
    B = seeds.shape[0]
    cap = B * (2 * size + 1)
    feature = np.empty(cap, dtype=np.int64)
    threshold = np.empty(cap)
    left = np.empty(cap, dtype=np.int64)
    right = np.empty(cap, dtype=np.int64)
    value = np.empty(cap)
    n_node = np.empty(cap, dtype=np.int64)
    w_node = np.empty(cap)
    sse_node = np.empty(cap)
    depth = np.empty(cap, dtype=np.int64)
    offsets = np.zeros(B + 1, dtype=np.int64)
    inbag = np.zeros((B, n), dtype=np.int32)
    perm = np.empty(n, dtype=np.int64)
    rows = np.empty(size, dtype=np.int64)
    for b in range(B):
        np.random.seed(seeds[b])
        if replace:
            for i in range(size):
                rows[i] = np.random.randint(n)
        else:
            for i in range(n):
                perm[i] = i
            for i in range(size):
                r = i + np.random.randint(n - i)
                t = perm[i]
                perm[i] = perm[r]
                perm[r] = t
                rows[i] = perm[i]
        for i in range(size):
            inbag[b, rows[i]] += 1
        m = _grow_into(X, y, w, rows, max_depth, min_leaf, 2, mtry, xorder, offsets[b],
                       feature, threshold, left, right, value, n_node, w_node, sse_node, depth)
        offsets[b + 1] = offsets[b] + m
    t = offsets[B]
    return (offsets, feature[:t].copy(), threshold[:t].copy(), left[:t].copy(),
            right[:t].copy(), value[:t].copy(), inbag)


@njit(cache=True, nogil=True)
def apply_tree(X, feature, threshold, left, right):
    """Leaf index reached by each row of ``X``."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True, nogil=True)
def predict_forest(X, offsets, feature, threshold, left, right, value):
    """Per-tree predictions, shape ``(n_trees, n_rows)``.

    Node arrays of all trees are concatenated; tree ``b`` occupies
    ``offsets[b]:offsets[b+1]`` with child indices local to the tree.
    """
    n_trees = offsets.shape[0] - 1
    n = X.shape[0]
    out = np.empty((n_trees, n))
    for b in range(n_trees):
        o = offsets[b]
        for i in range(n):
            node = 0
            while feature[o + node] != LEAF:
                if X[i, feature[o + node]] <= threshold[o + node]:
                    node = left[o + node]
                else:
                    node = right[o + node]
            out[b, i] = value[o + node]
    return out
