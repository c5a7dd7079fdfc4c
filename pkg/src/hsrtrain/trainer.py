"""Mini-batch SGD for the shifted-ReLU network with index-backed fire sets.

Each iteration draws a fresh batch, finds every sample's fire set (through
the ball-tree index, or a dense scan for the reference backend), runs the
forward and backward passes over fired neurons only, updates the touched
rows of W and moves those rows inside the index.  Both backends evaluate the
firing predicate with the same compiled dot product and reduce in sorted-id
order, so they produce bit-identical runs.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from numba import njit

from .core import Distribution, EvenPolynomial, Rng, ShapeError, quadratic_form_polynomial, sample_sphere
from .hsr import BallTreeIndex, _scan_batch, locality_order
from .network import (TwoLayerNet, _forward_sparse, _forward_values, _gradient_rows, default_b0,
                      forward_sparse_batch, init_net)

BACKENDS = ("hsr", "dense")
METRICS_HEADER = ["t", "loss", "fired_total", "q_size", "t_query_us", "t_forward_us",
                  "t_backward_us", "t_update_us"]


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class RecordingDisabledError(RuntimeError):
    pass


def normal_cdf(z: float) -> float:
    return NormalDist().cdf(z)


@dataclass
class TrainConfig:
    d: int
    m: int
    eta: float
    batch: int
    T: int
    seed: int = 0
    B: float = 1.0
    b0: float | None = None  # None: sqrt(0.4 ln 2m)
    backend: str = "hsr"
    target: EvenPolynomial | None = None  # None: a random quadratic form <u, x>^2
    input: Distribution | None = None  # None: uniform sphere
    record_fire_sets: bool = False
    debug: bool = False

    def __post_init__(self):
        if self.d < 1 or self.m < 1 or self.batch < 1 or self.T < 1:
            raise ValueError("d, m, batch and T must all be >= 1")
        if self.B <= 0:
            raise ValueError("B must be positive")
        if self.eta < 0 or not math.isfinite(self.eta):
            raise ValueError("learning rate must be finite and nonnegative")
        if self.b0 is not None and self.b0 < 0:
            raise ValueError("b0 must be nonnegative")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.input is None:
            self.input = Distribution.sphere(self.d)
        if self.input.d != self.d:
            raise ValueError("input distribution dimension differs from d")
        if self.target is None:
            u = sample_sphere(self.d, Rng(self.seed).split("target"))
            self.target = quadratic_form_polynomial(u, 1.0)
        if self.target.d != self.d:
            raise ValueError("target dimension differs from d")

    @property
    def resolved_b0(self) -> float:
        return default_b0(self.m) if self.b0 is None else float(self.b0)

    def manifest(self) -> dict:
        return {
            "d": self.d, "m": self.m, "B": self.B, "b0": self.resolved_b0, "eta": self.eta,
            "batch": self.batch, "T": self.T, "seed": self.seed, "backend": self.backend,
            "input": self.input.kind, "target_degree": self.target.c, "target_norm": self.target.M,
            "target_terms": len(self.target.coefs),
        }


@dataclass
class TrainMetrics:
    """Per-iteration records; times are wall-clock microseconds."""

    t: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    fired_total: list = field(default_factory=list)
    fired_max: list = field(default_factory=list)
    q_size: list = field(default_factory=list)
    t_query_us: list = field(default_factory=list)
    t_forward_us: list = field(default_factory=list)
    t_backward_us: list = field(default_factory=list)
    t_update_us: list = field(default_factory=list)
    build_us: float = 0.0

    def __len__(self):
        return len(self.t)

    def iteration_us(self) -> np.ndarray:
        """Query + forward + backward + update time of each iteration."""
        return (np.asarray(self.t_query_us) + np.asarray(self.t_forward_us)
                + np.asarray(self.t_backward_us) + np.asarray(self.t_update_us))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for row in zip(*(getattr(self, k) for k in METRICS_HEADER)):
                w.writerow([row[0], repr(float(row[1])), *row[2:4], *(f"{v:.3f}" for v in row[4:])])


@dataclass
class FireLog:
    """Fire sets of each batch before and after its own update, plus the flips.

    Entry t holds flat (ids, offsets) pairs for batch t under W(t) and W(t+1),
    and the flip sets computed directly from the rows that moved.
    """

    before: list = field(default_factory=list)
    after: list = field(default_factory=list)
    flips: list = field(default_factory=list)


@dataclass
class TrainResult:
    returned: TwoLayerNet
    final: TwoLayerNet
    metrics: TrainMetrics
    t_star: int
    fire_log: FireLog | None = None


def fire_sets_dense_flat(net: TwoLayerNet, X, live: np.ndarray | None = None):
    """Exact strict-threshold scan over all 2m neurons; returns (ids, offsets)."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    if X.shape[1] != net.d:
        raise ShapeError(f"expected inputs of dimension {net.d}, got {X.shape[1]}")
    if live is None:
        live = np.ones(net.W.shape[0], dtype=np.bool_)
    ids, offsets, _ = _scan_batch(net.W, live, X, float(net.b0))
    return ids, offsets


@njit(cache=True)
def _step_rows(W, rows, G, eta):
    # same rounding as W[rows] -= eta * G
    for u in range(rows.shape[0]):
        r = rows[u]
        for j in range(W.shape[1]):
            W[r, j] = W[r, j] - eta * G[u, j]


def fire_sets_dense(net: TwoLayerNet, X) -> list[np.ndarray]:
    """Sorted fire set of every row of X under ``net``."""
    ids, offsets = fire_sets_dense_flat(net, X)
    return [ids[offsets[i]:offsets[i + 1]] for i in range(len(offsets) - 1)]


def _flip_sets(W_old_rows: np.ndarray, W_new_rows: np.ndarray, rows: np.ndarray, X: np.ndarray, b0: float):
    """Neurons among ``rows`` whose firing state on each x changes with the move."""
    before = X @ W_old_rows.T > b0
    after = X @ W_new_rows.T > b0
    return [rows[np.flatnonzero(before[i] != after[i])] for i in range(X.shape[0])]


def _to_external(order: np.ndarray, ids: np.ndarray, offsets: np.ndarray):
    ext = order[ids]
    for i in range(len(offsets) - 1):
        ext[offsets[i]:offsets[i + 1]].sort()
    return ext, offsets


def train(cfg: TrainConfig, net: TwoLayerNet | None = None) -> TrainResult:
    """Run cfg.T SGD iterations and return the random-iterate and final nets.

    Internally neurons are stored in ball-tree leaf order (for both backends),
    so the rows touched by one sample sit close together in memory.  Sums
    run in sorted internal-position order; every reported id, fire set and
    returned network uses the caller's neuron numbering.
    """
    rng = Rng(cfg.seed)
    if net is None:
        net = init_net(cfg.d, cfg.m, cfg.B, rng.split("init"), cfg.resolved_b0)
    order = locality_order(net.W)
    inv = np.empty_like(order)
    inv[order] = np.arange(order.shape[0])
    outer = net
    net = TwoLayerNet(net.W[order], net.a[order], net.b0, net.B)

    def external() -> TwoLayerNet:
        return TwoLayerNet(net.W[inv], net.a[inv], outer.b0, outer.B)

    b0 = float(net.b0)
    t_star = int(rng.split("t_star").integers(1, cfg.T + 1))
    scale = 1.0 / math.sqrt(2 * net.m)
    metrics = TrainMetrics()
    log = FireLog() if cfg.record_fire_sets else None
    live = np.ones(net.W.shape[0], dtype=np.bool_)
    scratch = np.full(net.W.shape[0], -1, dtype=np.int64)
    returned = None

    index = None
    if cfg.backend == "hsr":
        t0 = time.perf_counter_ns()
        index = BallTreeIndex(net.W, share=True)
        # the index owns the storage; steps on it are steps on the network
        net.W = index.points[: net.W.shape[0]]
        metrics.build_us = (time.perf_counter_ns() - t0) / 1e3

    for t in range(1, cfg.T + 1):
        X = cfg.input.sample(rng.split("batch", t), cfg.batch)
        y = cfg.target(X)
        if t == t_star:
            returned = external()

        t0 = time.perf_counter_ns()
        if index is not None:
            ids, offsets, vals = index.query_batch_values(X, b0)
        else:
            ids, offsets, vals = _scan_batch(net.W, live, X, b0)
        t1 = time.perf_counter_ns()
        u = _forward_values(net.a, b0, ids, offsets, vals)
        if cfg.debug:
            ref_u, bad = _forward_sparse(net.W, net.a, b0, X, ids, offsets, True)
            if bad >= 0 or not np.array_equal(ref_u, u):
                raise AssertionError(f"stale fire set or inner products at iteration {t}")
        u *= scale
        resid = u - y
        with np.errstate(over="ignore", invalid="ignore"):
            loss = 0.5 * float(resid @ resid)
        if not math.isfinite(loss):
            raise DivergenceError(t, loss)
        t2 = time.perf_counter_ns()
        rows, G = _gradient_rows(net.a, X, resid, ids, offsets, scratch, scale)
        t3 = time.perf_counter_ns()
        if log is not None:
            old_rows = net.W[rows].copy()
        if index is not None:
            index.step(rows, G, cfg.eta)
        else:
            _step_rows(net.W, rows, G, cfg.eta)
        t4 = time.perf_counter_ns()

        if cfg.debug and index is not None:
            ref = _scan_batch(net.W, live, X, b0)
            got = index.query_batch_values(X, b0)
            if not all(np.array_equal(r, g) for r, g in zip(ref, got)):
                raise AssertionError(f"index answers diverged from the dense scan at iteration {t}")
        if log is not None:
            log.before.append(_to_external(order, ids, offsets))
            log.after.append(_to_external(order, *_scan_batch(net.W, live, X, b0)[:2]))
            log.flips.append([np.sort(order[f]) for f in _flip_sets(old_rows, net.W[rows], rows, X, b0)])

        counts = np.diff(offsets)
        metrics.t.append(t)
        metrics.loss.append(loss)
        metrics.fired_total.append(int(counts.sum()))
        metrics.fired_max.append(int(counts.max()))
        metrics.q_size.append(len(rows))
        metrics.t_query_us.append((t1 - t0) / 1e3)
        metrics.t_forward_us.append((t2 - t1) / 1e3)
        metrics.t_backward_us.append((t3 - t2) / 1e3)
        metrics.t_update_us.append((t4 - t3) / 1e3)

    return TrainResult(returned, external(), metrics, t_star, log)


def held_out_loss(net: TwoLayerNet, target: EvenPolynomial, dist: Distribution, rng: Rng,
                  n: int = 10_000) -> tuple[float, float]:
    """Mean of 0.5 (f(x) - p(x))^2 over n fresh samples, with its standard error."""
    X = dist.sample(rng, n)
    ids, offsets = fire_sets_dense_flat(net, X)
    r = forward_sparse_batch(net, X, (ids, offsets)) - target(X)
    per = 0.5 * r * r
    return float(per.mean()), float(per.std(ddof=1) / math.sqrt(n))


# ---- learning-rate search ----------------------------------------------------

ETA_GRID = tuple(2.0 ** k for k in range(4, -15, -1))


def run_diverged(result: TrainResult | None, window: int = 100) -> bool:
    """A run counts as diverged if it produced a non-finite loss, or if its
    mean batch loss over the last ``window`` iterations exceeds the mean over
    the first ``window``."""
    if result is None:
        return True
    loss = np.asarray(result.metrics.loss)
    w = max(1, min(window, len(loss) // 2))
    return not np.all(np.isfinite(loss)) or loss[-w:].mean() > loss[:w].mean()


def tune_learning_rate(cfg: TrainConfig, grid=ETA_GRID) -> tuple[float, TrainResult]:
    """Try learning rates from largest to smallest; keep the first that does not diverge."""
    last = None
    for eta in sorted(grid, reverse=True):
        trial = TrainConfig(**{**cfg.__dict__, "eta": eta})
        try:
            result = train(trial)
        except DivergenceError:
            continue
        last = (eta, result)
        if not run_diverged(result):
            return eta, result
    if last is None:
        raise DivergenceError(0, float("nan"))
    return last


# ---- experiments -------------------------------------------------------------


def sparsity_experiment(m_grid, d: int, trials: int, rng: Rng, n_inputs: int = 100,
                        b0: float | None = None) -> list[dict]:
    """Fired-neuron counts of freshly initialized nets on random sphere inputs.

    For each m the threshold is sqrt(0.4 ln m) unless ``b0`` is given.  Counts
    are over all 2m neurons; the prediction for the mean fraction is
    Phi(-b0), and the reference for the count is (2m)^(4/5).
    """
    rows = []
    for m in m_grid:
        m = int(m)
        thr = math.sqrt(0.4 * math.log(m)) if b0 is None else float(b0)
        fractions, trial_means, max_fired = [], [], 0
        for k in range(trials):
            net = init_net(d, m, 1.0, rng.split("sparsity-net", m * 1000 + k), thr)
            X = sample_sphere(d, rng.split("sparsity-x", m * 1000 + k), n_inputs)
            counts = (X @ net.W.T > thr).sum(axis=1)
            max_fired = max(max_fired, int(counts.max()))
            frac = counts / (2 * m)
            fractions.append(frac)
            trial_means.append(frac.mean())
        fr = np.concatenate(fractions)
        mean_frac = float(fr.mean())
        se = float(fr.std(ddof=1) / math.sqrt(fr.size)) if fr.size > 1 else float("nan")
        p = normal_cdf(-thr)
        ref45 = (2 * m) ** 0.8
        rows.append({
            "m": m, "b0": thr, "mean_fired": mean_frac * 2 * m, "max_fired": max_fired,
            "mean_fraction": mean_frac, "stderr_fraction": se, "predicted_fraction": p,
            "ratio_phi": mean_frac / p if p > 0 else float("nan"),
            "ratio_m45": max_fired / ref45,
            "within_4se": abs(mean_frac - p) <= 4 * se,
            "max_ok": max_fired <= 2 * ref45 * 4,
        })
    return rows


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def scaling_experiment(m_grid, d: int, b: int, steps: int, rng: Rng, eta: float = 0.05,
                       backends=BACKENDS, repeats: int = 1) -> tuple[list[dict], dict]:
    """Median per-iteration time of each backend over a grid of m.

    Returns (rows, slopes) where slopes maps backend to the fitted log-log
    slope of median time against m.  With ``repeats`` > 1 the whole grid is
    swept that many times and each row keeps the median over sweeps, which
    damps slow drift in machine speed.  Rows also flag whether both backends
    saw identical fired counts at every iteration.
    """
    m_grid = [int(m) for m in m_grid]
    if len(m_grid) < 2:
        raise ValueError("need at least two grid points")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    seed = int(rng.split("scaling").integers(0, 2**63))
    # compile every kernel on a toy problem so timings exclude JIT work
    for be in backends:
        train(TrainConfig(d=d, m=64, eta=eta, batch=b, T=2, seed=seed, backend=be))
    times = {(m, be): [] for m in m_grid for be in backends}
    query = {(m, be): [] for m in m_grid for be in backends}
    fired_equal = {m: True for m in m_grid}
    for _ in range(repeats):
        for m in m_grid:
            fired = {}
            for be in backends:
                res = train(TrainConfig(d=d, m=m, eta=eta, batch=b, T=steps, seed=seed, backend=be))
                times[m, be].append(float(np.median(res.metrics.iteration_us())))
                query[m, be].append(float(np.median(res.metrics.t_query_us)))
                fired[be] = res.metrics.fired_total
            fired_equal[m] &= all(fired[be] == fired[backends[0]] for be in backends)
    rows = []
    for m in m_grid:
        row = {"m": m, "b0": default_b0(m)}
        for be in backends:
            row[f"median_us_{be}"] = float(np.median(times[m, be]))
            row[f"query_us_{be}"] = float(np.median(query[m, be]))
        row["fired_equal"] = fired_equal[m]
        rows.append(row)
    slopes = {be: loglog_slope(m_grid, [r[f"median_us_{be}"] for r in rows]) for be in backends}
    return rows, slopes


@dataclass
class FlipStatistics:
    mean_flips: np.ndarray  # per iteration, mean |flip set| over the batch
    max_flips: np.ndarray
    nonflip_fraction: float
    identity_holds: bool


def flip_statistics(result: TrainResult) -> FlipStatistics:
    """Flip-set sizes per iteration and the share of neurons that never flipped.

    Also checks that |fire(t+1) sym-diff fire(t)| equals the number of flips
    found directly from the moved rows, for every recorded sample.
    """
    log = result.fire_log
    if log is None:
        raise RecordingDisabledError("train with record_fire_sets=True to collect flip sets")
    n_neurons = result.final.W.shape[0]
    ever = np.zeros(n_neurons, dtype=bool)
    mean_f, max_f, ok = [], [], True
    for (ib, ob), (ia, oa), flips in zip(log.before, log.after, log.flips):
        sizes = []
        for i, fl in enumerate(flips):
            sym = np.setxor1d(ib[ob[i]:ob[i + 1]], ia[oa[i]:oa[i + 1]])
            ok &= np.array_equal(sym, np.sort(fl))
            ever[fl] = True
            sizes.append(len(fl))
        mean_f.append(float(np.mean(sizes)))
        max_f.append(int(np.max(sizes)))
    return FlipStatistics(np.array(mean_f), np.array(max_f), float(1 - ever.mean()), bool(ok))


def write_manifest(path, entries: dict) -> None:
    with open(path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k}={v}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out
