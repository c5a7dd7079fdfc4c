"""Random streams, input distributions on the unit sphere, and even polynomial targets."""

from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field

import numpy as np


class InvalidDimensionError(ValueError):
    pass


class InsufficientSamplesError(ValueError):
    pass


class InvalidDegreeError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


class Rng:
    """Seeded, splittable random stream backed by numpy's counter-based Philox.

    ``split(label, index)`` derives a child stream from the root seed and the
    (label, index) key only, so adding a new consumer never shifts the samples
    seen by an existing one.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, label: str, index: int = 0) -> "Rng":
        return Rng(self.seed, self._key + (_label_key(label), int(index)))

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def signs(self, size) -> np.ndarray:
        return np.where(self.gen.random(size) < 0.5, -1.0, 1.0)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._key})"


def _check_dim(d: int) -> None:
    if d < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {d}")


def sample_sphere(d: int, rng: Rng, n: int | None = None) -> np.ndarray:
    """Uniform point(s) on S^{d-1}: normalized standard Gaussian draws.

    Returns shape (d,) when ``n`` is None, otherwise (n, d).
    """
    _check_dim(d)
    g = rng.normal((1 if n is None else n, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero Gaussian vector has probability zero; redraw defensively
    while np.any(norms == 0):
        bad = (norms == 0).ravel()
        g[bad] = rng.normal((int(bad.sum()), d))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
    x = g / norms
    return x[0] if n is None else x


def sample_cube(d: int, rng: Rng, n: int | None = None) -> np.ndarray:
    """Uniform vertex of the scaled cube {+-1/sqrt(d)}^d."""
    _check_dim(d)
    x = rng.signs((1 if n is None else n, d)) / math.sqrt(d)
    return x[0] if n is None else x


@dataclass(frozen=True)
class Distribution:
    kind: str  # "uniform-sphere" | "discrete-cube" | "finite-point-set"
    d: int
    points: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        _check_dim(self.d)
        if self.kind not in ("uniform-sphere", "discrete-cube", "finite-point-set"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "finite-point-set":
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            if pts.shape[1] != self.d or pts.shape[0] == 0:
                raise ShapeError("finite point set must be a nonempty (n, d) array")
            norms = np.linalg.norm(pts, axis=1)
            if not np.allclose(norms, 1.0, rtol=0, atol=1e-12):
                raise ValueError("finite point set must lie on the unit sphere")
            object.__setattr__(self, "points", pts)

    @classmethod
    def sphere(cls, d: int) -> "Distribution":
        return cls("uniform-sphere", d)

    @classmethod
    def cube(cls, d: int) -> "Distribution":
        return cls("discrete-cube", d)

    @classmethod
    def finite(cls, points) -> "Distribution":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls("finite-point-set", pts.shape[1], pts)

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        """Draw an (n, d) array of unit vectors."""
        if self.kind == "uniform-sphere":
            return sample_sphere(self.d, rng, n)
        if self.kind == "discrete-cube":
            return sample_cube(self.d, rng, n)
        idx = rng.integers(0, self.points.shape[0], size=n)
        return self.points[idx]


def top_eigenvalue(mat: np.ndarray, rtol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    d = mat.shape[0]
    v = np.ones(d) / math.sqrt(d)
    # a start vector orthogonal to the top eigenvector would stall; perturb it
    v = v + np.linspace(0.0, 1e-3, d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        lam = float(v @ w)
        # the residual bounds the eigen-gap error; a small change in lam alone
        # can stall well short of the top eigenvalue
        if np.linalg.norm(w - lam * v) <= rtol * abs(lam):
            return lam
        v = w / nw
    return lam


def estimate_r_bound(dist: Distribution, num_samples: int, rng: Rng) -> float:
    """Estimate R with sup_u E<u,x>^2 = R^2/d from the uncentered second-moment matrix."""
    if num_samples <= 0:
        raise InsufficientSamplesError("num_samples must be positive")
    x = dist.sample(rng, num_samples)
    second_moment = x.T @ x / num_samples
    return math.sqrt(dist.d * top_eigenvalue(second_moment))


@dataclass(frozen=True)
class EvenPolynomial:
    """sum_alpha coef[alpha] * prod_i x_i^alpha_i over even multi-indices."""

    d: int
    c: int
    M: float
    exponents: np.ndarray  # (K, d) int
    coefs: np.ndarray  # (K,)

    def __post_init__(self):
        exps = np.asarray(self.exponents, dtype=np.int64).reshape(-1, self.d)
        coefs = np.asarray(self.coefs, dtype=float).ravel()
        if exps.shape[0] != coefs.shape[0]:
            raise ShapeError("one coefficient per multi-index")
        deg = exps.sum(axis=1)
        if np.any(deg % 2) or np.any(deg > self.c) or np.any(exps < 0):
            raise InvalidDegreeError("multi-indices must have even total degree <= c")
        if float(coefs @ coefs) > self.M**2 * (1 + 1e-12):
            raise ValueError("coefficient norm exceeds M")
        object.__setattr__(self, "exponents", exps)
        object.__setattr__(self, "coefs", coefs)

    def __call__(self, x: np.ndarray) -> np.ndarray | float:
        return eval_polynomial(self, x)

    def __add__(self, other: "EvenPolynomial") -> "EvenPolynomial":
        if other.d != self.d:
            raise ShapeError("dimension mismatch")
        exps = np.vstack([self.exponents, other.exponents])
        coefs = np.concatenate([self.coefs, other.coefs])
        uniq, inv = np.unique(exps, axis=0, return_inverse=True)
        merged = np.zeros(len(uniq))
        np.add.at(merged, inv.ravel(), coefs)
        # triangle inequality keeps the merged norm within M_p + M_q
        return EvenPolynomial(self.d, max(self.c, other.c), self.M + other.M, uniq, merged)

    @property
    def coef_norm(self) -> float:
        return float(np.sqrt(self.coefs @ self.coefs))


MAX_ENUMERATED_INDICES = 10_000


def _num_monomials(d: int, k: int) -> int:
    return math.comb(d + k - 1, k)


def even_multi_indices(d: int, c: int) -> np.ndarray:
    """All multi-indices with even total degree <= c, lexicographically ordered."""
    out = []
    for k in range(0, c + 1, 2):
        # combinations_with_replacement is lexicographic in variable order
        for combo in itertools.combinations_with_replacement(range(d), k):
            alpha = [0] * d
            for i in combo:
                alpha[i] += 1
            out.append(alpha)
    out.sort()
    return np.array(out, dtype=np.int64).reshape(-1, d)


def _random_even_index(d: int, c: int, rng: Rng) -> tuple[int, ...]:
    degrees = list(range(0, c + 1, 2))
    k = degrees[int(rng.integers(0, len(degrees)))]
    alpha = np.zeros(d, dtype=np.int64)
    if k:
        np.add.at(alpha, rng.integers(0, d, size=k), 1)
    return tuple(int(a) for a in alpha)


def sample_even_polynomial(c: int, M: float, d: int, rng: Rng) -> EvenPolynomial:
    """Random member of the even polynomial class with coefficient norm exactly M.

    Coefficients are Gaussian over every even multi-index of degree <= c, or over
    a random subset of 10^4 indices when the full set is larger.
    """
    _check_dim(d)
    if M <= 0:
        raise ValueError("M must be positive")
    if c < 0:
        raise InvalidDegreeError("degree bound must be nonnegative")
    c_even = c - (c % 2)
    total = sum(_num_monomials(d, k) for k in range(0, c_even + 1, 2))
    if total <= MAX_ENUMERATED_INDICES:
        exps = even_multi_indices(d, c_even)
    else:
        chosen: set[tuple[int, ...]] = set()
        while len(chosen) < MAX_ENUMERATED_INDICES:
            chosen.add(_random_even_index(d, c_even, rng))
        exps = np.array(sorted(chosen), dtype=np.int64)
    coefs = rng.normal(len(exps))
    while not np.any(coefs):
        coefs = rng.normal(len(exps))
    coefs *= M / np.sqrt(coefs @ coefs)
    return EvenPolynomial(d, c_even, M, exps, coefs)


def quadratic_form_polynomial(u: np.ndarray, M: float = 1.0) -> EvenPolynomial:
    """Scaled <u, x>^2 as an even polynomial whose coefficient norm equals M."""
    u = np.asarray(u, dtype=float).ravel()
    d = len(u)
    exps, coefs = [], []
    for i in range(d):
        for j in range(i, d):
            alpha = [0] * d
            alpha[i] += 1
            alpha[j] += 1
            exps.append(alpha)
            coefs.append(u[i] * u[j] * (1.0 if i == j else 2.0))
    coefs = np.array(coefs)
    coefs *= M / np.sqrt(coefs @ coefs)
    return EvenPolynomial(d, 2, M, np.array(exps), coefs)


def eval_polynomial(p: EvenPolynomial, x: np.ndarray) -> np.ndarray | float:
    """Evaluate p at a point (d,) or at each row of an (n, d) array."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[1] != p.d:
        raise ShapeError(f"expected dimension {p.d}, got {xs.shape[1]}")
    # (n, K): prod_i x_i^alpha_i; 0**0 == 1 in numpy
    mono = np.prod(xs[:, None, :] ** p.exponents[None, :, :], axis=2)
    vals = mono @ p.coefs
    return float(vals[0]) if single else vals
