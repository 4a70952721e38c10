"""Independent reference implementations shared by several test modules."""
import numpy as np


def brute_ij(inbag, preds, s, bias_correct=True):
    """Loop-based infinitesimal jackknife with plain 1/B covariances."""
    B, n = inbag.shape
    q = preds.shape[1]
    scale = (n - 1) / n * (n / (n - s)) ** 2
    out = np.empty(q)
    for j in range(q):
        t = preds[:, j]
        tm = t.mean()
        total = 0.0
        for i in range(n):
            ni = inbag[:, i]
            cov = sum((ni[b] - ni.mean()) * (t[b] - tm) for b in range(B)) / B
            total += cov * cov
        v = scale * total
        if bias_correct:
            var_t = sum((t[b] - tm) ** 2 for b in range(B)) / B
            v -= scale * n * (s / n) * (1 - s / n) * var_t / B
        out[j] = v
    return out
