"""Two-layer shifted-ReLU network with paired initialization.

f(W, x, a) = (1/sqrt(2m)) * sum_r a_r * max(0, <w_r, x> - b0)

Only the first-layer weights W train.  A neuron fires on x when
<w_r, x> > b0 (strict), which is also where the activation derivative is 1.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import Rng, ShapeError
from .hsr import _dot


class EmptyBatchError(ValueError):
    pass


class StaleFireSetError(AssertionError):
    """A fire set names a neuron that does not fire on its input."""


class CheckpointFormatError(ValueError):
    pass


def shifted_relu(z, b0: float):
    return np.maximum(0.0, np.asarray(z, dtype=float) - b0)


def shifted_relu_deriv(z, b0: float):
    """1 where z > b0 strictly, else 0 (so the derivative at the kink is 0)."""
    return (np.asarray(z, dtype=float) > b0).astype(float)


def default_b0(m: int) -> float:
    """Threshold sqrt(0.4 ln(2m)) used for training runs."""
    return math.sqrt(0.4 * math.log(2 * m))


@dataclass
class TwoLayerNet:
    W: np.ndarray  # (2m, d)
    a: np.ndarray  # (2m,), entries +-B
    b0: float
    B: float

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] % 2 or self.a.shape != (self.W.shape[0],):
            raise ShapeError("W must be (2m, d) with one output weight per row")
        if self.b0 < 0:
            raise ValueError("b0 must be nonnegative")

    @property
    def m(self) -> int:
        return self.W.shape[0] // 2

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "TwoLayerNet":
        return TwoLayerNet(self.W.copy(), self.a.copy(), self.b0, self.B)


def init_net(d: int, m: int, B: float, rng: Rng, b0: float | None = None) -> TwoLayerNet:
    """Gaussian first layer with every row duplicated and the output signs
    negated across each pair, so the network starts as the zero function."""
    if d < 1 or m < 1 or B <= 0:
        raise ValueError("need d >= 1, m >= 1, B > 0")
    half = rng.split("weights").normal((m, d))
    signs = rng.split("signs").signs(m) * B
    W = np.vstack([half, half])
    a = np.concatenate([signs, -signs])
    return TwoLayerNet(W, a, default_b0(m) if b0 is None else float(b0), float(B))


def _as_batch(net: TwoLayerNet, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[-1] != net.d:
        raise ShapeError(f"expected inputs of dimension {net.d}, got {X.shape[-1]}")
    return X


def forward_dense(net: TwoLayerNet, x) -> np.ndarray | float:
    """Exact sum over all 2m neurons for a point (d,) or batch (n, d)."""
    X = _as_batch(net, x)
    Z = X @ net.W.T
    out = (np.maximum(0.0, Z - net.b0) @ net.a) / math.sqrt(2 * net.m)
    return float(out[0]) if np.ndim(x) == 1 else out


@njit(cache=True)
def _forward_sparse(W, a, b0, X, ids, offsets, check):
    n = X.shape[0]
    u = np.zeros(n)
    bad = -1
    for i in range(n):
        s = 0.0
        for k in range(offsets[i], offsets[i + 1]):
            r = ids[k]
            z = _dot(X[i], W[r])
            if check and not z > b0:
                bad = r
            if z > b0:
                s += a[r] * (z - b0)
        u[i] = s
    return u, bad


@njit(cache=True)
def _forward_values(a, b0, ids, offsets, vals):
    """Unscaled outputs from the inner products an index query already computed.

    Sums in the same order as _forward_sparse, so results are bit-identical.
    """
    n = offsets.shape[0] - 1
    u = np.zeros(n)
    for i in range(n):
        s = 0.0
        for k in range(offsets[i], offsets[i + 1]):
            s += a[ids[k]] * (vals[k] - b0)
        u[i] = s
    return u


def _flatten_fire(fire_sets, n: int) -> tuple[np.ndarray, np.ndarray]:
    # a tuple (ids, offsets) is the flat form produced by the index backends
    if isinstance(fire_sets, tuple) and len(fire_sets) == 2 and np.shape(fire_sets[1]) == (n + 1,):
        ids, offsets = fire_sets
        return np.ascontiguousarray(ids, dtype=np.int64), np.ascontiguousarray(offsets, dtype=np.int64)
    sets = list(fire_sets)
    if len(sets) != n:
        raise ShapeError("need exactly one fire set per sample")
    offsets = np.zeros(n + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(s) for s in sets])
    ids = np.concatenate([np.asarray(s, dtype=np.int64) for s in sets]) if n else np.zeros(0, np.int64)
    return ids, offsets


def forward_sparse_batch(net: TwoLayerNet, X, fire_sets, debug: bool = False) -> np.ndarray:
    """Network outputs summed over each sample's fire set only.

    ``fire_sets`` is a list of id arrays or a flat ``(ids, offsets)`` pair.
    Sums run in the order the ids are given (sorted, for reproducibility).
    With ``debug`` set, a listed neuron that does not fire raises
    StaleFireSetError.
    """
    X = _as_batch(net, X)
    ids, offsets = _flatten_fire(fire_sets, X.shape[0])
    u, bad = _forward_sparse(net.W, net.a, float(net.b0), X, ids, offsets, debug)
    if bad >= 0:
        raise StaleFireSetError(f"neuron {bad} is listed as firing but does not fire")
    return u / math.sqrt(2 * net.m)


def forward_sparse(net: TwoLayerNet, x, fire, debug: bool = False) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("forward_sparse takes a single input; use forward_sparse_batch")
    return float(forward_sparse_batch(net, x[None, :], [fire], debug)[0])


def _check_labels(X: np.ndarray, y) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if X.shape[0] == 0:
        raise EmptyBatchError("batch is empty")
    if y.shape != (X.shape[0],):
        raise ShapeError("one label per sample")
    return y


def per_sample_residuals(net: TwoLayerNet, X, y) -> np.ndarray:
    """f(x_i) - y_i for every sample."""
    X = _as_batch(net, X)
    y = _check_labels(X, y)
    return forward_dense(net, X) - y


def l2_loss(net: TwoLayerNet, X, y) -> float:
    """Half the summed squared residual over the batch."""
    r = per_sample_residuals(net, X, y)
    return 0.5 * float(r @ r)


@dataclass
class SparseGradient:
    """Gradient of the loss in W, nonzero only on ``rows`` (sorted ids)."""

    rows: np.ndarray  # (k,) int64
    values: np.ndarray  # (k, d)
    shape: tuple[int, int]

    def to_dense(self) -> np.ndarray:
        G = np.zeros(self.shape)
        G[self.rows] = self.values
        return G


@njit(cache=True)
def _sorted_union(ids, offsets):
    """Distinct ids of all fire sets, ascending.

    Fire sets from the index are already sorted, so adjacent runs are merged
    pairwise; unsorted input falls back to a full sort.
    """
    n = offsets.shape[0] - 1
    for i in range(n):
        for k in range(offsets[i] + 1, offsets[i + 1]):
            if ids[k] <= ids[k - 1]:
                return np.unique(ids)
    src = ids.copy()
    dst = np.empty_like(src)
    bounds = offsets.copy()
    runs = n
    while runs > 1:
        out = 0
        nb = 0
        for r in range(0, runs, 2):
            lo1 = bounds[r]
            hi1 = bounds[r + 1]
            if r + 1 < runs:
                hi2 = bounds[r + 2]
            else:
                hi2 = hi1
            bounds[nb] = out
            nb += 1
            i = lo1
            j = hi1
            while i < hi1 or j < hi2:
                if j >= hi2 or (i < hi1 and src[i] <= src[j]):
                    v = src[i]
                    i += 1
                else:
                    v = src[j]
                    j += 1
                if out == bounds[nb - 1] or dst[out - 1] != v:
                    dst[out] = v
                    out += 1
        bounds[nb] = out
        runs = nb
        src, dst = dst, src
    if runs == 1:
        return src[bounds[0]:bounds[1]].copy()
    return src[:0].copy()


@njit(cache=True)
def _gradient_rows(a, X, resid, ids, offsets, pos, scale):
    """Scatter resid_i * a_r * x_i into one row per distinct fired id.

    ``pos`` is an all -1 scratch array over neuron ids and is restored before
    returning.  Rows come back sorted by id; each row accumulates samples in
    batch order.
    """
    n, d = X.shape
    rows = _sorted_union(ids, offsets)
    nq = rows.shape[0]
    for q in range(nq):
        pos[rows[q]] = q
    G = np.zeros((nq, d))
    for i in range(n):
        c = resid[i]
        if c == 0.0:
            continue
        for k in range(offsets[i], offsets[i + 1]):
            r = ids[k]
            q = pos[r]
            g = c * a[r] * scale
            for j in range(d):
                G[q, j] += g * X[i, j]
    for q in range(nq):
        pos[rows[q]] = -1
    return rows, G


def sparse_gradient(net: TwoLayerNet, X, y, fire_sets, residuals=None,
                    scratch: np.ndarray | None = None) -> SparseGradient:
    """Gradient of half the summed squared residual with respect to W.

    Row r is (1/sqrt(2m)) a_r sum over samples firing r of (f(x_i) - y_i) x_i;
    every row outside the union of the fire sets is zero.  ``residuals`` may be
    passed when already known; ``scratch`` is an optional reusable array of
    2m entries, all -1.
    """
    X = _as_batch(net, X)
    ids, offsets = _flatten_fire(fire_sets, X.shape[0])
    if residuals is None:
        y = _check_labels(X, y)
        residuals = forward_sparse_batch(net, X, (ids, offsets)) - y
    pos = np.full(2 * net.m, -1, dtype=np.int64) if scratch is None else scratch
    rows, G = _gradient_rows(net.a, X, np.ascontiguousarray(residuals, dtype=float), ids, offsets,
                             pos, 1.0 / math.sqrt(2 * net.m))
    return SparseGradient(rows, G, net.W.shape)


def dense_gradient(net: TwoLayerNet, X, y) -> np.ndarray:
    """Full (2m, d) gradient computed without fire sets, for cross-checks."""
    X = _as_batch(net, X)
    r = per_sample_residuals(net, X, y)
    gate = (X @ net.W.T > net.b0).astype(float)  # (n, 2m)
    return (net.a / math.sqrt(2 * net.m))[:, None] * ((gate * r[:, None]).T @ X)


# ---- checkpoints -------------------------------------------------------------

_MAGIC = b"HSRNET\x00\x01"
_VERSION = 1
_HEADER = struct.Struct("<8sIQQdd")


def save_checkpoint(net: TwoLayerNet, path) -> None:
    """Binary layout: magic, version, d, m, B, b0, W row-major f64, a f64 (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, net.d, net.m, net.B, net.b0))
        fh.write(net.W.astype("<f8").tobytes(order="C"))
        fh.write(net.a.astype("<f8").tobytes())


def load_checkpoint(path) -> TwoLayerNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointFormatError("file too short")
    magic, version, d, m, B, b0 = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CheckpointFormatError("bad magic")
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    n_w = 2 * m * d
    expected = _HEADER.size + 8 * (n_w + 2 * m)
    if len(raw) != expected:
        raise CheckpointFormatError(f"expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    W = body[:n_w].reshape(2 * m, d).astype(np.float64)
    a = body[n_w:].astype(np.float64)
    return TwoLayerNet(W, a, b0, B)
