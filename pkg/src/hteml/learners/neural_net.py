"""Single-hidden-layer network with logistic hidden units and a linear output.

Trained by full-batch gradient descent on ``mean((y - f)^2) + decay * ||theta||^2``
where ``theta`` collects every weight and bias. Inputs and target are
standardized internally; the decay acts on the standardized-scale weights.
"""
from __future__ import annotations

import numpy as np

from .base import LearnerError, Predictor, check_xy, kfold_labels


def _unpack(theta, p, h):
    i = 0
    w1 = theta[i:i + p * h].reshape(p, h)
    i += p * h
    b1 = theta[i:i + h]
    i += h
    w2 = theta[i:i + h]
    b2 = theta[i + h]
    return w1, b1, w2, b2


def n_params(p, h):
    return p * h + h + h + 1


def forward(theta, x, p, h):
    w1, b1, w2, b2 = _unpack(theta, p, h)
    a = 1.0 / (1.0 + np.exp(-(x @ w1 + b1)))
    return a @ w2 + b2, a


def loss_and_grad(theta, x, y, w, decay, h):
    """Penalized weighted MSE and its analytic gradient."""
    p = x.shape[1]
    out, a = forward(theta, x, p, h)
    r = out - y
    sw = w.sum()
    loss = float(w @ r**2 / sw + decay * theta @ theta)
    g_out = 2.0 * w * r / sw
    w1, b1, w2, b2 = _unpack(theta, p, h)
    g_w2 = a.T @ g_out
    g_b2 = g_out.sum()
    g_a = np.outer(g_out, w2) * a * (1.0 - a)
    g_w1 = x.T @ g_a
    g_b1 = g_a.sum(axis=0)
    grad = np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]]) + 2.0 * decay * theta
    return loss, grad


def train(x, y, w, hidden, decay, max_iter, step, tol, rng):
    p = x.shape[1]
    theta = rng.uniform(-0.7, 0.7, n_params(p, hidden))
    loss, grad = loss_and_grad(theta, x, y, w, decay, hidden)
    for _ in range(max_iter):
        while True:
            cand = theta - step * grad
            c_loss, c_grad = loss_and_grad(cand, x, y, w, decay, hidden)
            if np.isfinite(c_loss) and c_loss <= loss:
                break
            step *= 0.5
            if step < 1e-12:
                return theta, loss
        improvement = loss - c_loss
        theta, loss, grad = cand, c_loss, c_grad
        step *= 1.05
        if improvement < tol * (1.0 + loss):
            break
    if not np.isfinite(loss):
        raise LearnerError("neural_net: non-finite training loss")
    return theta, loss


class NeuralNetPredictor(Predictor):
    method = "neural_net"

    def __init__(self, theta, hidden, decay, x_center, x_scale, y_center, y_scale, loss):
        self.theta = theta
        self.hidden = hidden
        self.decay = decay
        self.x_center = x_center
        self.x_scale = x_scale
        self.y_center = y_center
        self.y_scale = y_scale
        self.train_loss = loss
        self.n_features = len(x_center)

    def _predict(self, x):
        z = (x - self.x_center) / self.x_scale
        out, _ = forward(self.theta, z, self.n_features, self.hidden)
        return self.y_center + self.y_scale * out


def _fit_one(x, y, w, hidden, decay, max_iter, step, tol, seed):
    xc = np.average(x, axis=0, weights=w)
    xs = np.sqrt(np.average((x - xc) ** 2, axis=0, weights=w))
    xs = np.where(xs > 0, xs, 1.0)
    yc = float(np.average(y, weights=w))
    ys = float(np.sqrt(np.average((y - yc) ** 2, weights=w)))
    if ys == 0.0:
        theta = np.zeros(n_params(x.shape[1], hidden))
        return NeuralNetPredictor(theta, hidden, decay, xc, xs, yc, 1.0, 0.0)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    theta, loss = train((x - xc) / xs, (y - yc) / ys, w, hidden, decay, max_iter, step, tol, rng)
    return NeuralNetPredictor(theta, hidden, decay, xc, xs, yc, ys, loss)


def fit_neural_net(x, y, weights=None, *, hidden=2, decay=0.01, max_iter=5000, step=0.5,
                   tol=1e-10, decay_grid=None, hidden_grid=None, cv_folds=10, seed=0):
    """Fit the network; optional ``decay_grid``/``hidden_grid`` are searched by K-fold CV."""
    x, y, w = check_xy(x, y, weights)
    decays = list(decay_grid) if decay_grid else [decay]
    sizes = list(hidden_grid) if hidden_grid else [hidden]
    if len(decays) * len(sizes) > 1:
        folds = kfold_labels(len(y), cv_folds, np.random.default_rng(np.random.SeedSequence(seed)))
        best = None
        for h in sizes:
            for dcy in decays:
                err = 0.0
                for f in range(cv_folds):
                    tr, te = folds != f, folds == f
                    m = _fit_one(x[tr], y[tr], w[tr], h, dcy, max_iter, step, tol, seed + f)
                    err += float(np.sum(w[te] * (y[te] - m.predict(x[te])) ** 2))
                if best is None or err < best[0]:
                    best = (err, h, dcy)
        _, hidden, decay = best
    return _fit_one(x, y, w, hidden, decay, max_iter, step, tol, seed)
