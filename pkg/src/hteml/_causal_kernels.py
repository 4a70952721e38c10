"""Numba kernels for honest causal trees.

A node holds both training and estimation rows. Splits are scored on the
training rows with the honest criterion

    sum_leaves n_l * tau_l**2 / N_tr
        - (1/N_tr + 1/N_est) * sum_leaves (S2_t(l) / p + S2_c(l) / (1 - p))

(``p`` is the treated share of the training rows), evaluated incrementally
along each sorted candidate variable. Leaf effects use the estimation rows only.
"""
import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True, nogil=True)
def _leaf_value(nt, st, sst, nc, sc, ssc, inv_ntr, pen, p):
    tau = st / nt - sc / nc
    vt = (sst - st * st / nt) / (nt - 1.0)
    vc = (ssc - sc * sc / nc) / (nc - 1.0)
    if vt < 0.0:
        vt = 0.0
    if vc < 0.0:
        vc = 0.0
    return (nt + nc) * tau * tau * inv_ntr - pen * (vt / p + vc / (1.0 - p))


@njit(cache=True, nogil=True)
def grow_causal(X, y, d, train_rows, est_rows, mtry, min_t, min_c, max_depth, seed,
                o, feature, threshold, left, right, tau, n_t, n_c, depth):
    """Grow one honest tree into the output arrays at offset ``o``.

    Child indices are local to the tree. ``tau``, ``n_t`` and ``n_c`` hold
    estimation-row statistics for every node. Returns the node count.
    """
    np.random.seed(seed)
    p = X.shape[1]
    ntr = train_rows.shape[0]
    nes = est_rows.shape[0]
    m = ntr + nes
    rows = np.empty(m, dtype=np.int64)
    is_tr = np.empty(m, dtype=np.bool_)
    for i in range(ntr):
        rows[i] = train_rows[i]
        is_tr[i] = True
    for i in range(nes):
        rows[ntr + i] = est_rows[i]
        is_tr[ntr + i] = False
    ptr = 0.0
    for i in range(ntr):
        ptr += d[train_rows[i]]
    ptr /= ntr
    inv_ntr = 1.0 / ntr
    pen = 1.0 / ntr + 1.0 / nes
    # training rows need two per arm for within-leaf variances
    min_t_tr = max(min_t, 2)
    min_c_tr = max(min_c, 2)

    cap = 2 * m + 1
    starts = np.empty(cap, dtype=np.int64)
    ends = np.empty(cap, dtype=np.int64)
    stack = np.empty(cap, dtype=np.int64)
    feats = np.empty(p, dtype=np.int64)
    vals = np.empty(m)
    buf = np.empty(m, dtype=np.int64)
    bflag = np.empty(m, dtype=np.bool_)

    n_nodes = 1
    starts[0] = 0
    ends[0] = m
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
        # node statistics
        et = 0
        ec = 0
        est_t = 0.0
        est_c = 0.0
        tt = 0.0
        tc = 0.0
        st = 0.0
        sc = 0.0
        sst = 0.0
        ssc = 0.0
        for i in range(s, e):
            r = rows[i]
            if is_tr[i]:
                if d[r] > 0.5:
                    tt += 1.0
                    st += y[r]
                    sst += y[r] * y[r]
                else:
                    tc += 1.0
                    sc += y[r]
                    ssc += y[r] * y[r]
            else:
                if d[r] > 0.5:
                    et += 1
                    est_t += y[r]
                else:
                    ec += 1
                    est_c += y[r]
        n_t[g] = et
        n_c[g] = ec
        if et > 0 and ec > 0:
            tau[g] = est_t / et - est_c / ec
        else:
            tau[g] = np.nan
        if depth[g] >= max_depth:
            continue
        if et < 2 * min_t or ec < 2 * min_c or tt < 2 * min_t_tr or tc < 2 * min_c_tr:
            continue

        parent = _leaf_value(tt, st, sst, tc, sc, ssc, inv_ntr, pen, ptr)
        best_gain = 1e-12 * (1.0 + abs(parent))
        best_f = -1
        best_thr = 0.0
        _sample_features(p, mtry, feats)
        cnt = e - s
        for fi in range(mtry):
            f = feats[fi]
            for i in range(cnt):
                vals[i] = X[rows[s + i], f]
            ordr = np.argsort(vals[:cnt], kind="mergesort")
            lt = 0.0
            lc = 0.0
            lst = 0.0
            lsc = 0.0
            lsst = 0.0
            lssc = 0.0
            let = 0
            lec = 0
            for k in range(cnt - 1):
                i = s + ordr[k]
                r = rows[i]
                if is_tr[i]:
                    if d[r] > 0.5:
                        lt += 1.0
                        lst += y[r]
                        lsst += y[r] * y[r]
                    else:
                        lc += 1.0
                        lsc += y[r]
                        lssc += y[r] * y[r]
                else:
                    if d[r] > 0.5:
                        let += 1
                    else:
                        lec += 1
                v0 = vals[ordr[k]]
                v1 = vals[ordr[k + 1]]
                if v1 <= v0:
                    continue
                if let < min_t or lec < min_c or lt < min_t_tr or lc < min_c_tr:
                    continue
                if et - let < min_t or ec - lec < min_c or tt - lt < min_t_tr or tc - lc < min_c_tr:
                    continue
                gain = (_leaf_value(lt, lst, lsst, lc, lsc, lssc, inv_ntr, pen, ptr)
                        + _leaf_value(tt - lt, st - lst, sst - lsst, tc - lc, sc - lsc,
                                      ssc - lssc, inv_ntr, pen, ptr)
                        - parent)
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_thr = 0.5 * (v0 + v1)
                    if best_thr >= v1:
                        best_thr = v0
        if best_f < 0:
            continue

        nl = 0
        nr = 0
        for i in range(s, e):
            r = rows[i]
            fl = is_tr[i]
            if X[r, best_f] <= best_thr:
                rows[s + nl] = r
                is_tr[s + nl] = fl
                nl += 1
            else:
                buf[nr] = r
                bflag[nr] = fl
                nr += 1
        for k in range(nr):
            rows[s + nl + k] = buf[k]
            is_tr[s + nl + k] = bflag[k]
        lcn = n_nodes
        rcn = n_nodes + 1
        n_nodes += 2
        feature[g] = best_f
        threshold[g] = best_thr
        left[g] = lcn
        right[g] = rcn
        starts[lcn] = s
        ends[lcn] = s + nl
        starts[rcn] = s + nl
        ends[rcn] = e
        depth[o + lcn] = depth[g] + 1
        depth[o + rcn] = depth[g] + 1
        stack[sp] = rcn
        sp += 1
        stack[sp] = lcn
        sp += 1
    return n_nodes


@njit(cache=True, nogil=True)
def _sample_features(p, mtry, buf):
    for j in range(p):
        buf[j] = j
    for j in range(mtry):
        r = j + np.random.randint(p - j)
        t = buf[j]
        buf[j] = buf[r]
        buf[r] = t


@njit(cache=True, nogil=True)
def leaf_index(X, offsets, feature, threshold, left, right):
    """Local leaf index reached by every row in every tree, shape ``(B, n)``."""
    B = offsets.shape[0] - 1
    n = X.shape[0]
    out = np.empty((B, n), dtype=np.int64)
    for b in range(B):
        o = offsets[b]
        for i in range(n):
            node = 0
            while feature[o + node] != LEAF:
                if X[i, feature[o + node]] <= threshold[o + node]:
                    node = left[o + node]
                else:
                    node = right[o + node]
            out[b, i] = node
    return out


@njit(cache=True, nogil=True)
def tree_effects(X, offsets, feature, threshold, left, right, tau):
    """Leaf effect of every tree for every row, shape ``(B, n)``."""
    B = offsets.shape[0] - 1
    n = X.shape[0]
    out = np.empty((B, n))
    for b in range(B):
        o = offsets[b]
        for i in range(n):
            node = 0
            while feature[o + node] != LEAF:
                if X[i, feature[o + node]] <= threshold[o + node]:
                    node = left[o + node]
                else:
                    node = right[o + node]
            out[b, i] = tau[o + node]
    return out
