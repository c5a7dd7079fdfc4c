import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal, norm

from hsrtrain.core import Distribution, Rng, quadratic_form_polynomial, sample_sphere
from hsrtrain.kernel_rfs import (DomainError, LinearizedModel, RfsEmbedding, _loss_and_slope,
                                 dual_activation_mc, hoeffding_delta, hoeffding_min_m,
                                 kernel_concentration_check, linear_witness_target, m_kernel,
                                 m_kernel_matrix, ntk_equivalence_experiment, reference_kernel,
                                 rfs_approximation_check, rfs_train, sgdrfs_bound, train_linearized)
from hsrtrain.network import forward_sparse_batch, init_net
from hsrtrain.trainer import TrainConfig, fire_sets_dense_flat, train

from oracles import truncated_second_moment


def exact_kernel(x1, x2, b0):
    """Pr[<w,x1> > b0, <w,x2> > b0] <x1,x2> from the bivariate normal CDF."""
    rho = float(np.dot(x1, x2))
    if abs(rho) > 1 - 1e-12:
        p = norm.sf(b0) if rho > 0 else max(0.0, norm.cdf(-b0) - norm.cdf(b0)) * (b0 < 0)
        return p * rho
    # P(X > b0, Y > b0) = P(-X < -b0, -Y < -b0)
    p = multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]]).cdf([-b0, -b0])
    return float(p) * rho


class TestEmbedding:
    def test_features_bounded_and_factorized(self):
        emb = RfsEmbedding.sample(500, 6, 0.3, Rng(0))
        for x in sample_sphere(6, Rng(1), 20):
            F = emb.features(x)
            assert np.all(np.linalg.norm(F, axis=1) <= 1.0 + 1e-12)
            gate = emb.gates(x)[0]
            assert set(np.unique(gate)) <= {0.0, 1.0}
            assert np.array_equal(F, gate[:, None] * x[None, :])

    def test_embed_inner_product_is_m_kernel(self):
        emb = RfsEmbedding.sample(300, 5, 0.2, Rng(2))
        X = sample_sphere(5, Rng(3), 2)
        E = emb.embed(X)
        assert E[0] @ E[1] == pytest.approx(m_kernel(emb, X[0], X[1]), rel=1e-12, abs=1e-15)


class TestMKernel:
    def test_orthogonal_inputs(self):
        emb = RfsEmbedding.sample(1000, 3, 0.0, Rng(0))
        assert m_kernel(emb, np.array([1.0, 0, 0]), np.array([0, 1.0, 0])) == 0.0

    def test_opposite_inputs(self):
        emb = RfsEmbedding.sample(1000, 3, 0.0, Rng(0))
        x = sample_sphere(3, Rng(1))
        assert m_kernel(emb, x, -x) == 0.0

    def test_diagonal_is_half(self):
        emb = RfsEmbedding.sample(100_000, 4, 0.0, Rng(2))
        x = sample_sphere(4, Rng(3))
        assert abs(m_kernel(emb, x, x) - 0.5) <= 0.01

    def test_symmetric_and_psd(self):
        emb = RfsEmbedding.sample(200, 5, 0.4, Rng(4))
        X = sample_sphere(5, Rng(5), 20)
        K = m_kernel_matrix(emb, X)
        assert np.array_equal(K, K.T)
        assert np.linalg.eigvalsh(K).min() >= -1e-8
        assert K[2, 7] == pytest.approx(m_kernel(emb, X[2], X[7]), rel=1e-12)

    def test_reference_matches_bivariate_normal(self):
        rng = Rng(6)
        for k in range(4):
            x = sample_sphere(4, rng.split("pair", k), 2)
            for b0 in (0.0, 0.7):
                ref = reference_kernel(x[0], x[1], b0, rng.split("mc", k), samples=400_000)
                assert ref == pytest.approx(exact_kernel(x[0], x[1], b0), abs=4e-3)


class TestConcentration:
    def test_hoeffding_sizes(self):
        m = hoeffding_min_m(0.05, 0.01)
        assert m <= 4240 and hoeffding_delta(4240, 0.05) <= 0.01
        assert hoeffding_delta(m - 1, 0.05) > 0.01

    def test_wide_epsilon_never_violated(self):
        res = kernel_concentration_check(4, 0.0, 20, 1.1, 100, Rng(0), ref_samples=10_000)
        assert res.violations == 0

    def test_single_feature_violates_often(self):
        rng = Rng(1)
        base = sample_sphere(5, rng.split("base"), 200)
        # near-parallel pairs: a small perturbation of one unit vector
        other = base + 0.05 * rng.split("noise").normal(base.shape)
        other /= np.linalg.norm(other, axis=1, keepdims=True)
        pairs = np.stack([base, other], axis=1)
        res = kernel_concentration_check(5, 0.0, 1, 0.05, 200, rng, ref_samples=100_000, pairs=pairs)
        assert res.violation_rate > 0.5


class TestDualActivation:
    def test_zero_threshold_full_correlation(self):
        est, se = dual_activation_mc(0.0, 1.0, 400_000, Rng(0))
        assert abs(est - 0.5) <= 3 * se

    def test_zero_threshold_independent(self):
        est, se = dual_activation_mc(0.0, 0.0, 400_000, Rng(1))
        assert abs(est - 1 / (2 * math.pi)) <= 3 * se

    def test_closed_form_b0_one(self):
        want = truncated_second_moment(1.0)
        # the five-digit hand value rounds the two table entries
        assert want == pytest.approx(2 * 0.15866 - 0.24197, abs=2e-5)
        est, se = dual_activation_mc(1.0, 1.0, 400_000, Rng(2))
        assert abs(est - want) <= 3 * se

    def test_domain(self):
        with pytest.raises(DomainError):
            dual_activation_mc(0.0, 1.5, 10, Rng(0))

    def test_monotone_in_correlation(self):
        vals = []
        for rho in (0.0, 0.25, 0.5, 0.75, 1.0):
            vals.append(dual_activation_mc(0.5, rho, 200_000, Rng(3)))
        for (lo, se_lo), (hi, se_hi) in zip(vals, vals[1:]):
            assert hi >= lo - 3 * math.hypot(se_lo, se_hi)


class TestRfsTrain:
    def test_zero_rate(self):
        emb = RfsEmbedding.sample(64, 4, 0.0, Rng(0))
        res = rfs_train(emb, "absolute", 0.0, 4, 30, lambda X: np.ones(len(X)), Distribution.sphere(4), Rng(2))
        assert not res.model.v.any() and not res.final.v.any()
        assert np.all(res.loss_trace == 1.0)

    def test_zero_target(self):
        emb = RfsEmbedding.sample(64, 4, 0.0, Rng(0))
        res = rfs_train(emb, "absolute", 0.5, 4, 30, lambda X: np.zeros(len(X)), Distribution.sphere(4), Rng(2))
        assert np.all(res.loss_trace == 0.0)

    def test_loss_subgradients(self):
        pred = np.array([0.5, -0.2, 2.0])
        y = np.array([1.0, -1.0, 1.0])
        vals, slope = _loss_and_slope("absolute", pred, y)
        assert np.allclose(vals, [0.5, 0.8, 1.0]) and np.array_equal(slope, [-1.0, 1.0, 1.0])
        vals, slope = _loss_and_slope("hinge", pred, y)
        assert np.allclose(vals, [0.5, 0.8, 0.0]) and np.array_equal(slope, [-1.0, 1.0, 0.0])

    def test_bad_loss(self):
        emb = RfsEmbedding.sample(4, 2, 0.0, Rng(0))
        with pytest.raises(ValueError):
            rfs_train(emb, "squared", 0.1, 1, 1, lambda X: X[:, 0], Distribution.sphere(2), Rng(0))

    def test_learns_witness_target(self):
        d, m, T = 6, 512, 2000
        emb = RfsEmbedding.sample(m, d, 0.0, Rng(0))
        target = linear_witness_target(sample_sphere(d, Rng(1)), 0.0)
        res = rfs_train(emb, "absolute", 1 / math.sqrt(T), 1, T, target, Distribution.sphere(d), Rng(2))
        assert res.loss_trace[-200:].mean() < 0.5 * res.loss_trace[:200].mean()
        assert res.loss_trace[-200:].mean() <= sgdrfs_bound(1, 1, 1, 1, m, d, T) * 2

    def test_bound_formula(self):
        assert sgdrfs_bound(1, 2, 1, 3, 16, 4, 100) == pytest.approx(2 * 3 / 8 + 3 / 10)


class TestApproximation:
    def test_point_variance(self):
        u = sample_sphere(8, Rng(0))
        res = rfs_approximation_check(8, 1.0, 100_000, u, 2000, Rng(1), sphere_draws=2, sphere_points=100)
        assert res.point_expected == pytest.approx(0.13358 / 100_000, rel=1e-3)
        assert abs(res.point_mse - res.point_expected) <= 3 * res.point_stderr

    def test_large_threshold_vanishes(self):
        u = sample_sphere(4, Rng(0))
        res = rfs_approximation_check(4, 40.0, 100, u, 100, Rng(1), sphere_draws=2, sphere_points=50)
        assert res.point_mse == 0.0 and res.sphere_mse == 0.0

    def test_sphere_average_has_factor_d_gain(self):
        d, m = 8, 2000
        u = sample_sphere(d, Rng(0))
        res = rfs_approximation_check(d, 0.0, m, u, 200, Rng(1), sphere_draws=10, sphere_points=1000)
        assert res.sphere_mse <= 2 * res.bound
        assert res.sphere_mse < res.point_mse


class TestLinearized:
    def test_prediction_is_gradient_inner_product(self):
        net = init_net(3, 20, 1.0, Rng(0), b0=0.2)
        V = Rng(1).normal(net.W.shape)
        model = LinearizedModel(net.W, net.a, net.b0, V)
        X = sample_sphere(3, Rng(2), 6)
        gate = (X @ net.W.T > net.b0).astype(float)
        want = np.einsum("nr,r,nr->n", gate, net.a, X @ V.T) / math.sqrt(40)
        np.testing.assert_allclose(model.predict(X), want, rtol=1e-12, atol=1e-15)


class TestNtkEquivalence:
    def test_zero_rate_gives_zero_gap(self):
        target = quadratic_form_polynomial(sample_sphere(4, Rng(0)), 1.0)
        rows = ntk_equivalence_experiment(4, 64, 0.0, 4, 10, [1, 10], target, Rng(1), n_holdout=500)
        # both models are the zero function; only summation rounding remains
        assert all(r["gap"] <= 1e-12 for r in rows)

    def test_one_step_gap_shrinks_with_scale(self):
        # after one step the gap is the Taylor remainder, which scales like 1 / B
        d, m = 4, 256
        target = quadratic_form_polynomial(sample_sphere(d, Rng(0)), 1.0)
        X = sample_sphere(d, Rng(1), 2000)
        gaps = []
        for B in (1.0, 10.0, 100.0, 1000.0):
            cfg = TrainConfig(d=d, m=m, eta=1.0 / B ** 2, batch=8, T=1, seed=5, B=B, b0=0.0,
                              backend="dense", target=target)
            net0 = init_net(d, m, B, Rng(5).split("init"), 0.0)
            nn = train(cfg, net0).final
            _, lin = train_linearized(net0.W, net0.a / B, 0.0, 1.0, cfg)
            f_nn = forward_sparse_batch(nn, X, fire_sets_dense_flat(nn, X))
            gaps.append(float(np.mean(np.abs(f_nn - lin.predict(X)))))
        assert gaps == sorted(gaps, reverse=True)
        assert gaps[-1] < 1e-2 * gaps[0]

    def test_gap_decreases_with_scale(self):
        target = quadratic_form_polynomial(sample_sphere(8, Rng(3)), 1.0)
        rows = ntk_equivalence_experiment(8, 256, 1.0, 16, 150, [1, 1000], target, Rng(4), n_holdout=2000)
        assert not any(r["diverged"] for r in rows)
        assert rows[-1]["gap"] < rows[0]["gap"]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), d=st.integers(1, 8), b0=st.floats(0.0, 2.0))
def test_kernel_symmetry_property(seed, d, b0):
    emb = RfsEmbedding.sample(64, d, b0, Rng(seed))
    x = sample_sphere(d, Rng(seed).split("x"), 2)
    assert m_kernel(emb, x[0], x[1]) == m_kernel(emb, x[1], x[0])
    assert abs(m_kernel(emb, x[0], x[1])) <= 1.0
