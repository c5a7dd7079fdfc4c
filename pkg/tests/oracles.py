"""Independent reference computations shared by the unit and acceptance tests.

Nothing here calls into the package's compiled kernels; every value is
recomputed from its definition with plain numpy.
"""

import math

import numpy as np


def relu_net_output(W, a, b0, X):
    """Network output by the defining sum, one input at a time."""
    X = np.atleast_2d(X)
    m2 = W.shape[0]
    out = np.empty(len(X))
    for i, x in enumerate(X):
        z = W @ x
        out[i] = float(np.sum(a * np.maximum(0.0, z - b0))) / math.sqrt(m2)
    return out


def half_sq_loss(W, a, b0, X, y):
    r = relu_net_output(W, a, b0, X) - y
    return 0.5 * float(r @ r)


def fd_gradient(W, a, b0, X, y, h=1e-5, mask=None):
    """Central finite differences of the half squared loss in every (checked) entry of W."""
    G = np.full(W.shape, np.nan)
    for r in range(W.shape[0]):
        if mask is not None and not mask[r]:
            continue
        for j in range(W.shape[1]):
            Wp, Wm = W.copy(), W.copy()
            Wp[r, j] += h
            Wm[r, j] -= h
            G[r, j] = (half_sq_loss(Wp, a, b0, X, y) - half_sq_loss(Wm, a, b0, X, y)) / (2 * h)
    return G


def away_from_kink(W, X, b0, gap=1e-3):
    """Rows whose pre-activation stays more than ``gap`` from b0 on every input."""
    return np.all(np.abs(X @ W.T - b0) > gap, axis=0)


def fire_sets(W, X, b0):
    return [np.flatnonzero(W @ x > b0) for x in np.atleast_2d(X)]


def truncated_second_moment(b0):
    """E[max(0, X - b0)^2] for X ~ N(0, 1): (1 + b0^2) Phi(-b0) - b0 phi(b0)."""
    Phi = 0.5 * math.erfc(b0 / math.sqrt(2))
    phi = math.exp(-b0 * b0 / 2) / math.sqrt(2 * math.pi)
    return (1 + b0 * b0) * Phi - b0 * phi


def loglog_slope(xs, ys):
    x = np.log(np.asarray(xs, float))
    y = np.log(np.asarray(ys, float))
    x0, y0 = x - x.mean(), y - y.mean()
    return float(x0 @ y0 / (x0 @ x0))
