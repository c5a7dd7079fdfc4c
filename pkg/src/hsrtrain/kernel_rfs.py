"""Random-feature view of the shifted-ReLU network's tangent kernel.

Feature map: psi(w, x) = 1[<w, x> > b0] * x with w ~ N(0, I_d).  It is
1-bounded on the unit sphere and factorized (a 0/1 gate times x).  The
module estimates the induced kernel, trains linear models over m sampled
features, and compares a large-output-scale network against its
linearization at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import Distribution, EvenPolynomial, Rng, ShapeError, sample_sphere
from .hsr import _scan_batch
from .network import _gradient_rows, forward_sparse_batch, init_net
from .trainer import DivergenceError, TrainConfig, fire_sets_dense_flat, normal_cdf, train

LOSSES = ("absolute", "hinge")


class DomainError(ValueError):
    pass


# ---- embedding and models ----------------------------------------------------


@dataclass(frozen=True)
class RfsEmbedding:
    w: np.ndarray  # (m, d) feature directions
    b0: float
    C: float = 1.0  # bound on ||psi(w, x)|| for unit x, since sigma' is 0/1

    @classmethod
    def sample(cls, m: int, d: int, b0: float, rng: Rng) -> "RfsEmbedding":
        if m < 1 or d < 1:
            raise ValueError("need m >= 1 and d >= 1")
        return cls(rng.normal((m, d)), float(b0))

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[1]

    def _inputs(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ShapeError(f"expected dimension {self.d}, got {X.shape[1]}")
        return X

    def gates(self, X) -> np.ndarray:
        """(n, m) 0/1 matrix: feature i is on for x when <w_i, x> > b0."""
        X = self._inputs(X)
        return (X @ self.w.T > self.b0).astype(float)

    def features(self, x) -> np.ndarray:
        """(m, d) block of psi(w_i, x) for one input."""
        x = np.asarray(x, dtype=float)
        return self.gates(x)[0][:, None] * x[None, :]

    def embed(self, X) -> np.ndarray:
        """(n, m*d) rows Psi(x) = (psi(w_1, x), ..., psi(w_m, x)) / sqrt(m)."""
        X = self._inputs(X)
        G = self.gates(X)
        return (G[:, :, None] * X[:, None, :]).reshape(len(X), -1) / math.sqrt(self.m)


@dataclass
class RfsModel:
    v: np.ndarray  # (m, d)
    embedding: RfsEmbedding

    def predict(self, X) -> np.ndarray:
        """<v, Psi(x)> for each row of X."""
        X = self.embedding._inputs(X)
        G = self.embedding.gates(X)
        return (G * (X @ self.v.T)).sum(axis=1) / math.sqrt(self.embedding.m)


def m_kernel(emb: RfsEmbedding, x1, x2) -> float:
    """(1/m) sum_i <psi(w_i, x1), psi(w_i, x2)>."""
    g = emb.gates(np.vstack([np.asarray(x1, float), np.asarray(x2, float)]))
    return float(g[0] @ g[1]) / emb.m * float(np.dot(x1, x2))


def m_kernel_matrix(emb: RfsEmbedding, X) -> np.ndarray:
    """Gram matrix of the m-kernel over the rows of X."""
    X = emb._inputs(X)
    G = emb.gates(X)
    return (G @ G.T) / emb.m * (X @ X.T)


def _correlated_normals(rng: Rng, samples: int):
    z = rng.normal((2, samples))
    return z[0], z[1]


def reference_kernel(x1, x2, b0: float, rng: Rng, samples: int = 1_000_000,
                     base: tuple | None = None) -> float:
    """Monte Carlo value of E_w[1[<w,x1> > b0] 1[<w,x2> > b0]] <x1, x2>.

    For unit inputs the two projections are standard normals with correlation
    <x1, x2>, so only that pair is sampled.  ``base`` may supply a reusable
    pair of N(0,1) arrays (common random numbers across calls).
    """
    rho = float(np.clip(np.dot(x1, x2), -1.0, 1.0))
    z1, z2 = _correlated_normals(rng, samples) if base is None else base
    p = np.mean((z1 > b0) & (rho * z1 + math.sqrt(1 - rho * rho) * z2 > b0))
    return float(p) * rho


@dataclass
class ConcentrationResult:
    violation_rate: float
    stderr: float
    violations: int
    trials: int
    delta_bound: float  # 2 exp(-m eps^2 / (2 C^4)), the Hoeffding tail
    max_deviation: float


def hoeffding_delta(m: int, eps: float, C: float = 1.0) -> float:
    return min(1.0, 2.0 * math.exp(-m * eps * eps / (2.0 * C ** 4)))


def hoeffding_min_m(eps: float, delta: float, C: float = 1.0) -> int:
    """Smallest m with 2 C^4 eps^-2 ln(2 / delta) <= m."""
    return math.ceil(2.0 * C ** 4 / eps ** 2 * math.log(2.0 / delta))


def kernel_concentration_check(d: int, b0: float, m: int, eps: float, trials: int, rng: Rng,
                               ref_samples: int = 1_000_000, pairs: np.ndarray | None = None
                               ) -> ConcentrationResult:
    """Fraction of trials in which a fresh m-feature kernel misses the reference by >= eps.

    Each trial draws a random pair of unit vectors (or takes it from ``pairs``,
    shape (trials, 2, d)) and an independent embedding.
    """
    base = _correlated_normals(rng.split("reference"), ref_samples)
    bad = 0
    worst = 0.0
    for k in range(trials):
        if pairs is None:
            x = sample_sphere(d, rng.split("pair", k), 2)
        else:
            x = pairs[k]
        emb = RfsEmbedding.sample(m, d, b0, rng.split("embedding", k))
        dev = abs(m_kernel(emb, x[0], x[1]) - reference_kernel(x[0], x[1], b0, rng, base=base))
        worst = max(worst, dev)
        bad += dev >= eps
    rate = bad / trials
    return ConcentrationResult(rate, math.sqrt(rate * (1 - rate) / trials), bad, trials,
                               hoeffding_delta(m, eps), worst)


def dual_activation_mc(b0: float, rho: float, samples: int, rng: Rng) -> tuple[float, float]:
    """Monte Carlo E[sigma(X) sigma(Y)] for rho-correlated standard normals.

    Returns (estimate, standard error).  Reusing the same ``rng`` state across
    several rho values gives common random numbers.
    """
    if not -1.0 <= rho <= 1.0:
        raise DomainError(f"correlation must lie in [-1, 1], got {rho}")
    x, z = _correlated_normals(rng, samples)
    y = rho * x + math.sqrt(1.0 - rho * rho) * z
    prod = np.maximum(0.0, x - b0) * np.maximum(0.0, y - b0)
    return float(prod.mean()), float(prod.std(ddof=1) / math.sqrt(samples))


# ---- SGD over random features --------------------------------------------------


def _loss_and_slope(kind: str, pred: np.ndarray, y: np.ndarray):
    """Per-sample loss values and a subgradient with respect to the prediction."""
    if kind == "absolute":
        r = pred - y
        return np.abs(r), np.sign(r)
    if kind == "hinge":
        margin = 1.0 - y * pred
        return np.maximum(0.0, margin), np.where(margin > 0, -y, 0.0)
    raise ValueError(f"loss must be one of {LOSSES}")


@dataclass
class RfsTrainResult:
    model: RfsModel  # the uniformly random iterate
    final: RfsModel
    loss_trace: np.ndarray  # mean batch loss at each iteration, before its step
    t_star: int


def rfs_train(emb: RfsEmbedding, loss: str, eta: float, batch: int, T: int, target,
              dist: Distribution, rng: Rng) -> RfsTrainResult:
    """Subgradient SGD on v, starting from zero, over fresh mini-batches.

    ``target`` maps an (n, d) array to labels.  The returned model is v(t*)
    for t* drawn uniformly from 1..T before training.
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    if eta < 0 or batch < 1 or T < 1:
        raise ValueError("need eta >= 0, batch >= 1, T >= 1")
    v = np.zeros((emb.m, emb.d))
    t_star = int(rng.split("t_star").integers(1, T + 1))
    trace = np.empty(T)
    snap = None
    scale = 1.0 / math.sqrt(emb.m)
    for t in range(1, T + 1):
        if t == t_star:
            snap = v.copy()
        X = dist.sample(rng.split("batch", t), batch)
        y = np.asarray(target(X), dtype=float)
        G = emb.gates(X)
        pred = (G * (X @ v.T)).sum(axis=1) * scale
        vals, slope = _loss_and_slope(loss, pred, y)
        trace[t - 1] = vals.mean()
        if not math.isfinite(trace[t - 1]):
            raise DivergenceError(t, trace[t - 1])
        # d pred_i / d v_j = gate_ij x_i / sqrt(m)
        v -= eta * scale / batch * ((G * slope[:, None]).T @ X)
    return RfsTrainResult(RfsModel(snap, emb), RfsModel(v, emb), trace, t_star)


def sgdrfs_bound(L: float, R: float, C: float, M: float, m: int, d: int, T: int) -> float:
    """L R C M / sqrt(m d) + L C M / sqrt(T)."""
    return L * R * C * M / math.sqrt(m * d) + L * C * M / math.sqrt(T)


def linear_witness_target(u, b0: float):
    """x -> Phi(-b0) <u, x>: the kernel-space function whose witness is the constant u."""
    u = np.asarray(u, dtype=float)
    p = normal_cdf(-b0)
    return lambda X: p * (np.atleast_2d(X) @ u)


@dataclass
class ApproximationResult:
    point_mse: float  # E_w (f(u) - f_w(u))^2
    point_stderr: float
    point_expected: float  # Phi(-b0)(1 - Phi(-b0)) / m
    sphere_mse: float  # E_w E_x (f(x) - f_w(x))^2
    sphere_stderr: float
    sphere_expected: float  # Phi(-b0)(1 - Phi(-b0)) / (m d)
    bound: float  # R^2 C^2 ||f||_k^2 / (m d) with R = C = ||f||_k = 1


def rfs_approximation_check(d: int, b0: float, m: int, u, samples: int, rng: Rng,
                            sphere_draws: int = 20, sphere_points: int = 2000) -> ApproximationResult:
    """Mean-square gap between f(x) = Phi(-b0)<u, x> and its m-feature estimate.

    f_w(x) = (1/m) sum_i 1[<w_i, x> > b0] <u, x>.  At x = u the gap only
    involves the projections <w_i, u>, which are drawn directly as standard
    normals for each of ``samples`` fresh embeddings.  The sphere average uses
    ``sphere_draws`` full embeddings, each evaluated at ``sphere_points``
    uniform inputs.
    """
    u = np.asarray(u, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ValueError("u must be a unit vector")
    p = normal_cdf(-b0)
    prng = rng.split("point")
    sq = np.empty(samples)
    chunk = max(1, 4_000_000 // m)
    for s0 in range(0, samples, chunk):
        k = min(chunk, samples - s0)
        proj = prng.normal((k, m))
        frac = (proj > b0).mean(axis=1)
        sq[s0:s0 + k] = (p - frac) ** 2
    per_draw = np.empty(sphere_draws)
    for k in range(sphere_draws):
        emb = RfsEmbedding.sample(m, d, b0, rng.split("sphere-w", k))
        X = sample_sphere(d, rng.split("sphere-x", k), sphere_points)
        frac = np.empty(sphere_points)
        step = max(1, 4_000_000 // m)
        for s0 in range(0, sphere_points, step):
            frac[s0:s0 + step] = emb.gates(X[s0:s0 + step]).mean(axis=1)
        per_draw[k] = np.mean((X @ u) ** 2 * (p - frac) ** 2)
    return ApproximationResult(
        float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(samples)), p * (1 - p) / m,
        float(per_draw.mean()),
        float(per_draw.std(ddof=1) / math.sqrt(sphere_draws)) if sphere_draws > 1 else float("nan"),
        p * (1 - p) / (m * d), 1.0 / (m * d))


# ---- network versus its linearization ----------------------------------------


@njit(cache=True)
def _linear_forward(V, s, X, ids, offsets, scale):
    n = X.shape[0]
    d = X.shape[1]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for k in range(offsets[i], offsets[i + 1]):
            r = ids[k]
            dot = 0.0
            for j in range(d):
                dot += V[r, j] * X[i, j]
            acc += s[r] * dot
        out[i] = acc * scale
    return out


@dataclass
class LinearizedModel:
    """g_V(x) = <V, grad_W h_{W0}(x)> with unit output signs.

    Row r of the gradient feature is (1/sqrt(2m)) s_r 1[<w_r(0), x> > b0] x.
    """

    W0: np.ndarray
    s: np.ndarray  # unit output signs
    b0: float
    V: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.V is None:
            self.V = np.zeros_like(self.W0)
        self._live = np.ones(self.W0.shape[0], dtype=np.bool_)
        self._scale = 1.0 / math.sqrt(self.W0.shape[0])

    def fire(self, X):
        ids, offsets, _ = _scan_batch(self.W0, self._live, np.ascontiguousarray(X, dtype=float),
                                      float(self.b0))
        return ids, offsets

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        ids, offsets = self.fire(X)
        return _linear_forward(self.V, self.s, X, ids, offsets, self._scale)


def train_linearized(W0: np.ndarray, s: np.ndarray, b0: float, eta: float, cfg: TrainConfig
                     ) -> tuple[LinearizedModel, LinearizedModel]:
    """SGD on the linearized model over the batch stream that ``train(cfg)`` sees.

    Returns (random iterate at the trainer's t*, final model).
    """
    rng = Rng(cfg.seed)
    t_star = int(rng.split("t_star").integers(1, cfg.T + 1))
    model = LinearizedModel(W0, s, b0)
    pos = np.full(W0.shape[0], -1, dtype=np.int64)
    snap = None
    for t in range(1, cfg.T + 1):
        X = cfg.input.sample(rng.split("batch", t), cfg.batch)
        y = cfg.target(X)
        if t == t_star:
            snap = LinearizedModel(W0, s, b0, model.V.copy())
        ids, offsets = model.fire(X)
        resid = _linear_forward(model.V, s, X, ids, offsets, model._scale) - y
        loss = 0.5 * float(resid @ resid)
        if not math.isfinite(loss):
            raise DivergenceError(t, loss)
        rows, G = _gradient_rows(s, X, resid, ids, offsets, pos, model._scale)
        model.V[rows] -= eta * G
    return snap, model


def ntk_equivalence_experiment(d: int, m: int, eta: float, batch: int, T: int, B_grid,
                               target: EvenPolynomial, rng: Rng, n_holdout: int = 10_000,
                               b0: float | None = None, dist: Distribution | None = None
                               ) -> list[dict]:
    """Held-out loss gap between the network and its linearization, per output scale B.

    For each B the network trains with output weights +-B and learning rate
    eta / B^2; the linearized model trains with unit signs and learning rate
    eta.  Both share the initial first layer, the mini-batch stream and the
    random-iterate index, and are scored on one held-out set.
    """
    dist = Distribution.sphere(d) if dist is None else dist
    seed = int(rng.split("ntk-seed").integers(0, 2**63))
    hold = rng.split("holdout")
    rows = []
    lin_cache = None
    for B in B_grid:
        B = float(B)
        cfg = TrainConfig(d=d, m=m, eta=eta / B ** 2, batch=batch, T=T, seed=seed, B=B, b0=b0,
                          backend="dense", target=target, input=dist)
        net0 = init_net(d, m, B, Rng(seed).split("init"), cfg.resolved_b0)
        if lin_cache is None:
            # the linearized model does not depend on B: unit signs, same W0 and stream
            snap, _ = train_linearized(net0.W, net0.a / B, net0.b0, eta, cfg)
            X = dist.sample(hold, n_holdout)
            y = target(X)
            r = snap.predict(X) - y
            per = 0.5 * r * r
            lin_cache = (float(per.mean()), float(per.std(ddof=1) / math.sqrt(n_holdout)), X, y)
        lin_loss, lin_se, X, y = lin_cache
        row = {"B": B, "ntk_loss": lin_loss, "ntk_stderr": lin_se}
        try:
            res = train(cfg, net0)
        except DivergenceError as exc:
            row.update(nn_loss=float("nan"), nn_stderr=float("nan"), gap=float("nan"),
                       diverged=True, note=str(exc))
            rows.append(row)
            continue
        out = forward_sparse_batch(res.returned, X, fire_sets_dense_flat(res.returned, X))
        r = out - y
        per = 0.5 * r * r
        row.update(nn_loss=float(per.mean()), nn_stderr=float(per.std(ddof=1) / math.sqrt(n_holdout)),
                   gap=abs(float(per.mean()) - lin_loss), diverged=False, note="")
        rows.append(row)
    return rows
