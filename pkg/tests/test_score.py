"""Channel schedule, mixture log-density, exact score, bandwidth rules.

The load-bearing oracle is a 50-digit mpmath evaluation of the mixture
log-density on small fixed instances; the score is checked against central
finite differences of the implemented log-density, and the kernel mean
against a naive dense implementation.
"""

import math

import numpy as np
import pytest
from mpmath import mp

from idm.score import (
    bandwidth_plan,
    bandwidth_plan_from_sigma,
    empirical_score,
    log_density_hat,
    nw_estimate,
    population_score_circle,
    schedule_at,
    softmax_weights,
)


class TestSchedule:
    def test_endpoints_and_pythagoras(self):
        sp = schedule_at(0.0)
        assert (sp.alpha, sp.sigma) == (1.0, 0.0)
        for t in (1e-10, 1e-4, 0.3, 2.0, 40.0):
            sp = schedule_at(t)
            assert sp.alpha == math.exp(-t)
            np.testing.assert_allclose(sp.alpha**2 + sp.sigma**2, 1.0, atol=1e-15)

    def test_sigma_accurate_at_tiny_t(self):
        """sigma(1e-10) must match a 50-digit evaluation to machine precision."""
        mp.dps = 50
        for t in (1e-10, 1e-8, 1e-5):
            exact = float(mp.sqrt(1 - mp.e ** (-2 * mp.mpf(t))))
            got = schedule_at(t).sigma
            assert abs(got - exact) / exact < 1e-13

    def test_sigma_over_alpha_identity(self):
        for t in (1e-6, 0.05, 1.0):
            sp = schedule_at(t)
            np.testing.assert_allclose(
                sp.sigma_over_alpha, math.sqrt(math.expm1(2 * t)), rtol=1e-14
            )

    def test_rejects_negative_or_nonfinite(self):
        with pytest.raises(ValueError):
            schedule_at(-0.1)
        with pytest.raises(ValueError):
            schedule_at(float("nan"))


def _log_density_oracle(x, t, pts) -> float:
    mp.dps = 50
    alpha = mp.e ** (-mp.mpf(t))
    sigma2 = 1 - alpha**2
    terms = []
    for row in pts:
        q = mp.fsum((mp.mpf(float(xj)) - alpha * mp.mpf(float(pj))) ** 2
                    for xj, pj in zip(x, row))
        terms.append(mp.e ** (-q / (2 * sigma2)))
    val = (
        -mp.mpf(len(x)) / 2 * mp.log(2 * mp.pi * sigma2)
        + mp.log(mp.fsum(terms) / len(pts))
    )
    return float(val)


class TestLogDensity:
    # Small fixed instance with exactly representable coordinates.
    PTS = np.array(
        [[0.5, -1.0, 0.25], [1.0, 0.5, -0.75], [-0.5, 0.0, 1.0], [0.0, 0.0, 0.0]]
    )

    def test_matches_high_precision_oracle(self):
        for t in (0.05, 0.7, 3.0):
            for x in ([0.1, 0.2, -0.3], [2.0, -2.0, 0.5]):
                got = log_density_hat(np.array(x), t, self.PTS)
                want = _log_density_oracle(x, t, self.PTS)
                np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_batch_matches_single(self):
        xs = np.array([[0.1, 0.2, -0.3], [2.0, -2.0, 0.5], [0.5, -1.0, 0.25]])
        batch = log_density_hat(xs, 0.4, self.PTS)
        singles = [log_density_hat(row, 0.4, self.PTS) for row in xs]
        np.testing.assert_allclose(batch, singles, rtol=1e-14)

    def test_time_zero_sentinels(self):
        assert log_density_hat(self.PTS[1], 0.0, self.PTS) == np.inf
        assert log_density_hat(np.array([9.0, 9.0, 9.0]), 0.0, self.PTS) == -np.inf

    def test_normalizes_in_one_dimension(self):
        """exp(log p_t) integrates to 1 (trapezoid over a wide 1-d grid)."""
        pts = np.array([[-1.0], [0.3], [2.0]])
        grid = np.linspace(-9.0, 11.0, 40001)[:, None]
        vals = np.exp(log_density_hat(grid, 0.6, pts))
        total = np.trapezoid(vals, grid[:, 0])
        np.testing.assert_allclose(total, 1.0, atol=1e-8)

    def test_large_chunked_path_matches_naive(self):
        from scipy.special import logsumexp

        rng = np.random.default_rng(12)
        pts = rng.standard_normal((50, 4))
        xs = rng.standard_normal((3000, 4))  # wide enough to span chunks
        t = 0.5
        sp = schedule_at(t)
        diff = xs[:, None, :] - sp.alpha * pts[None, :, :]
        logs = -np.sum(diff**2, axis=2) / (2 * sp.sigma**2)
        naive = (
            -2.0 * np.log(2 * np.pi * sp.sigma**2)
            + logsumexp(logs, axis=1)
            - np.log(len(pts))
        )
        np.testing.assert_allclose(log_density_hat(xs, t, pts), naive, atol=1e-9)


class TestScore:
    def test_single_center_is_exact_gaussian_score(self):
        center = np.array([0.3, -1.2, 0.8])
        x = np.array([1.0, 0.5, -0.25])
        t = 0.9
        sp = schedule_at(t)
        want = -(x - sp.alpha * center) / sp.sigma**2
        np.testing.assert_allclose(
            empirical_score(x, t, center[None, :]), want, rtol=1e-14
        )

    def test_symmetric_pair_has_zero_score_at_center(self):
        pts = np.array([[-1.0], [1.0]])
        np.testing.assert_allclose(empirical_score(np.array([0.0]), 0.7, pts), 0.0, atol=1e-14)

    def test_matches_finite_differences(self):
        """Analytic gradient vs central differences of the log-density."""
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((20, 7)) / np.sqrt(7)
        for t in (1e-3, 0.03, 0.5, 3.0):
            sp = schedule_at(t)
            x = sp.alpha * pts[4] + sp.sigma * rng.standard_normal(7) * 0.5
            grad = empirical_score(x, t, pts)
            step = 1e-6 * max(1.0, float(np.linalg.norm(x)))
            fd = np.empty(7)
            for k in range(7):
                e = np.zeros(7)
                e[k] = step
                fd[k] = (
                    log_density_hat(x + e, t, pts) - log_density_hat(x - e, t, pts)
                ) / (2 * step)
            assert np.linalg.norm(fd - grad) <= 1e-5 * np.linalg.norm(grad)

    def test_rejects_time_zero(self):
        with pytest.raises(ValueError):
            empirical_score(np.zeros(2), 0.0, np.zeros((3, 2)))


class TestKernelMean:
    def test_matches_naive_dense(self):
        rng = np.random.default_rng(7)
        pts = rng.standard_normal((40, 5))
        z = rng.standard_normal((200, 5))
        sigma = 0.6
        logits = -np.sum((z[:, None, :] - pts[None, :, :]) ** 2, axis=2) / (2 * sigma**2)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        naive = w @ pts
        np.testing.assert_allclose(nw_estimate(z, sigma, pts), naive, atol=1e-12)

    def test_weights_recompose_the_mean(self):
        rng = np.random.default_rng(8)
        pts = rng.standard_normal((30, 3))
        z = rng.standard_normal(3)
        wv = softmax_weights(z, 0.4, pts)
        np.testing.assert_allclose(wv.weights.sum(), 1.0, rtol=1e-12)
        assert np.all(wv.weights >= 0.0)
        np.testing.assert_allclose(
            wv.weights @ pts, nw_estimate(z, 0.4, pts), atol=1e-12
        )

    def test_translation_invariant_weights(self):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((15, 4))
        z = rng.standard_normal(4)
        shift = np.array([3.0, -1.0, 0.5, 2.0])
        a = softmax_weights(z, 0.7, pts).weights
        b = softmax_weights(z + shift, 0.7, pts + shift).weights
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_stays_in_coordinate_hull(self):
        rng = np.random.default_rng(10)
        pts = rng.standard_normal((25, 6))
        z = rng.standard_normal((100, 6)) * 5.0
        est = nw_estimate(z, 0.3, pts)
        assert np.all(est <= pts.max(axis=0) + 1e-12)
        assert np.all(est >= pts.min(axis=0) - 1e-12)

    def test_lipschitz_bound(self):
        """|F(z) - F(z')| <= diam^2 / (4 sigma^2) |z - z'| for close pairs."""
        rng = np.random.default_rng(11)
        pts = rng.standard_normal((30, 4))
        diam = np.max(
            np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        )
        sigma = 0.9
        bound = diam**2 / (4 * sigma**2)
        z = rng.standard_normal((50, 4)) * 2.0
        delta = rng.standard_normal((50, 4))
        delta *= 1e-6 / np.linalg.norm(delta, axis=1, keepdims=True)
        moved = nw_estimate(z + delta, sigma, pts) - nw_estimate(z, sigma, pts)
        rates = np.linalg.norm(moved, axis=1) / 1e-6
        assert np.all(rates <= bound * (1 + 1e-6))

    def test_far_queries_keep_finite_weights(self):
        # logsumexp shifting must survive queries far outside the data.
        pts = np.array([[0.0, 0.0], [1.0, 0.0]])
        z = np.array([1e4, 1e4])
        est = nw_estimate(z, 0.5, pts)
        assert np.all(np.isfinite(est))

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            nw_estimate(np.zeros(2), 0.0, np.zeros((3, 2)))


class TestBandwidth:
    def test_exact_reference_value(self):
        # 1024^(1/10) = 2, so c0 = 0.8 at d = 6 gives sigma' = 0.4 exactly.
        plan = bandwidth_plan(0.8, 6, 1024)
        assert plan.sigma_prime == 0.4
        np.testing.assert_allclose(plan.h_squared, 0.5 * math.log1p(0.16), rtol=1e-15)

    def test_channel_time_inverts_sigma(self):
        """sigma_t / alpha_t at t = h^2 must reproduce sigma' exactly."""
        for c0, d, n in ((0.8, 6, 4096), (1.5, 2, 300), (0.3, 12, 10**6)):
            plan = bandwidth_plan(c0, d, n)
            sp = schedule_at(plan.h_squared)
            np.testing.assert_allclose(sp.sigma_over_alpha, plan.sigma_prime, rtol=1e-12)

    def test_from_sigma_roundtrip(self):
        plan = bandwidth_plan(0.8, 6, 500)
        back = bandwidth_plan_from_sigma(plan.sigma_prime, 6, 500)
        np.testing.assert_allclose(back.c0, 0.8, rtol=1e-12)
        assert back.h == plan.h

    def test_warns_when_no_contraction(self):
        with pytest.warns(RuntimeWarning):
            bandwidth_plan(2.0, 1, 2)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            bandwidth_plan(0.0, 3, 10)
        with pytest.raises(ValueError):
            bandwidth_plan(0.5, 0, 10)
        with pytest.raises(ValueError):
            bandwidth_plan_from_sigma(-0.1, 3, 10)


class TestPopulationScore:
    def test_quadrature_self_convergence(self):
        x = np.array([0.6, 0.1])
        a = population_score_circle(x, 0.3, quad_points=512)
        b = population_score_circle(x, 0.3, quad_points=4096)
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_empirical_score_approaches_population(self):
        """Empirical scores over growing n close in on the population score."""
        x = np.array([0.5, 0.3])
        t = 0.3
        target = population_score_circle(x, t, quad_points=2048)
        errs = []
        for n in (1000, 10000, 100000):
            theta = np.random.default_rng(17).uniform(0.0, 2 * np.pi, n)
            pts = np.column_stack([np.cos(theta), np.sin(theta)])
            errs.append(np.linalg.norm(empirical_score(x, t, pts) - target))
        assert errs[2] < errs[1] < errs[0]
        assert errs[2] < 0.01 * max(1.0, np.linalg.norm(target))

    def test_radial_symmetry(self):
        # The population density is rotation invariant, so the score at a
        # point on the x-axis must point along the x-axis.
        s = population_score_circle(np.array([0.7, 0.0]), 0.2)
        assert abs(s[1]) < 1e-10

    def test_rejects_coarse_grids(self):
        with pytest.raises(ValueError):
            population_score_circle(np.array([0.5, 0.0]), 0.3, quad_points=32)
