import math

import numpy as np
import pytest

from mlsurv.errors import ModelSpecError, ResourceError
from mlsurv.quadrature import (
    AdaptationWarning,
    IntegrationSettings,
    adapt_cluster,
    gauss_hermite,
    gauss_legendre,
    halton,
    mc_draws,
    shift_to_reference,
    tensor_nodes,
)
from mlsurv.random_effects import REDistribution


class TestGaussHermite:
    def test_single_node_is_midpoint(self):
        ns = gauss_hermite(1)
        assert ns.nodes[0, 0] == 0.0
        assert np.exp(ns.log_weights[0]) == pytest.approx(1.0)

    def test_two_nodes(self):
        ns = gauss_hermite(2)
        assert np.allclose(sorted(ns.nodes[:, 0]), [-1.0, 1.0])
        assert np.allclose(np.exp(ns.log_weights), [0.5, 0.5])

    def test_normal_moments_at_7(self):
        ns = gauss_hermite(7)
        w = np.exp(ns.log_weights)
        z = ns.nodes[:, 0]
        assert w @ z**2 == pytest.approx(1.0, abs=1e-12)
        assert w @ z**4 == pytest.approx(3.0, abs=1e-12)

    def test_polynomial_exactness_through_2n_minus_1(self):
        # E[Z^k] = (k-1)!! for even k, 0 for odd
        for n in (3, 5, 10, 20):
            ns = gauss_hermite(n)
            w = np.exp(ns.log_weights)
            z = ns.nodes[:, 0]
            for k in range(2 * n):
                exact = 0.0 if k % 2 else math.prod(range(k - 1, 0, -2)) or 1.0
                assert w @ z**k == pytest.approx(exact, abs=1e-8 * max(1, exact))

    def test_weights_sum_to_one(self):
        for n in (1, 7, 64, 200):
            assert np.exp(gauss_hermite(n).log_weights).sum() == pytest.approx(1.0, abs=1e-10)

    def test_nodes_symmetric(self):
        z = gauss_hermite(9).nodes[:, 0]
        assert np.allclose(z, -z[::-1])

    def test_range_errors(self):
        with pytest.raises(ModelSpecError):
            gauss_hermite(0)
        with pytest.raises(ModelSpecError):
            gauss_hermite(201)


class TestTensorNodes:
    def test_q1_identity(self):
        base = gauss_hermite(5)
        assert tensor_nodes(base, 1) is base

    def test_2x2(self):
        ns = tensor_nodes(gauss_hermite(2), 2)
        pts = {tuple(np.round(p, 12)) for p in ns.nodes}
        assert pts == {(-1, -1), (-1, 1), (1, -1), (1, 1)}
        assert np.allclose(np.exp(ns.log_weights), 0.25)

    def test_weights_sum_q3(self):
        ns = tensor_nodes(gauss_hermite(3), 3)
        assert ns.npoints == 27
        assert np.exp(ns.log_weights).sum() == pytest.approx(1.0, abs=1e-12)

    def test_resource_bound_suggests_mcarlo(self):
        with pytest.raises(ResourceError, match="mcarlo"):
            tensor_nodes(gauss_hermite(200), 4)


class TestGaussLegendre:
    def test_single_node_midpoint(self):
        ns = gauss_legendre(1, 0.0, 1.0)
        assert ns.nodes[0, 0] == pytest.approx(0.5)
        assert np.exp(ns.log_weights[0]) == pytest.approx(1.0)

    def test_degree3_exact_with_two_nodes(self):
        ns = gauss_legendre(2, 0.0, 1.0)
        val = np.exp(ns.log_weights) @ ns.nodes[:, 0] ** 3
        assert val == pytest.approx(0.25, abs=1e-15)

    def test_weibull_cumhazard_value(self):
        # integrand u^0.2 is not smooth at zero: the affinely mapped rule
        # carries a small but visible discretization error here (the
        # likelihood paths use a cubic node map instead, see families)
        ns = gauss_legendre(30, 0.0, 5.0)
        val = np.exp(ns.log_weights) @ (0.12 * ns.nodes[:, 0] ** 0.2)
        assert val == pytest.approx(0.1 * 5**1.2, abs=5e-5)

    def test_errors(self):
        with pytest.raises(ModelSpecError):
            gauss_legendre(0, 0.0, 1.0)
        with pytest.raises(ModelSpecError):
            gauss_legendre(3, 1.0, 1.0)


class TestAdaptCluster:
    def test_prior_only_leaves_nodes_unchanged(self):
        base = tensor_nodes(gauss_hermite(7), 1)

        def logf(b):
            return float(-0.5 * b @ b - 0.5 * np.log(2 * np.pi))

        ns = adapt_cluster(base, logf, np.eye(1), IntegrationSettings())
        assert np.allclose(ns.nodes, base.nodes, atol=1e-7)
        total = np.exp(ns.log_weights + [logf(b) for b in ns.nodes]).sum()
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_gaussian_kernel_adapts_exactly(self):
        base = tensor_nodes(gauss_hermite(7), 1)
        mu, s = 1.3, 0.4

        def logf(b):
            return float(-0.5 * ((b[0] - mu) / s) ** 2 - math.log(s * math.sqrt(2 * math.pi)))

        ns = adapt_cluster(base, logf, np.eye(1), IntegrationSettings())
        assert np.allclose(np.sort(ns.nodes[:, 0]), np.sort(mu + s * base.nodes[:, 0]), atol=1e-7)

    def test_toy_cluster_matches_dense_reference(self):
        # one exponential subject, scalar Gaussian random intercept
        t_obs, sd = 2.0, 0.7

        def logf(b):
            lp = -0.5 * (b[0] / sd) ** 2 - math.log(sd * math.sqrt(2 * math.pi))
            return float(b[0] - math.exp(b[0]) * t_obs + lp)

        base = tensor_nodes(gauss_hermite(7), 1)
        ns = adapt_cluster(base, logf, np.array([[sd**2]]), IntegrationSettings())
        val = np.log(np.exp(ns.log_weights + [logf(b) for b in ns.nodes]).sum())
        dense = shift_to_reference(tensor_nodes(gauss_hermite(200), 1), np.zeros(1),
                                   np.array([[3.0]]))
        ref_contrib = np.exp(dense.log_weights + [logf(b) for b in dense.nodes])
        ref = np.log(ref_contrib.sum())
        # a 200-point wide non-adaptive rule is the dense reference
        assert val == pytest.approx(ref, abs=1e-8)

    def test_nonconvergent_integrand_falls_back(self):
        base = tensor_nodes(gauss_hermite(7), 1)

        def logf(b):  # improper: keeps drifting, no finite mode
            return float(b[0])

        with pytest.warns(AdaptationWarning):
            ns = adapt_cluster(base, logf, np.eye(1), IntegrationSettings(adapt_iterations=5))
        assert np.allclose(ns.nodes, base.nodes, atol=1e-12)


class TestMonteCarlo:
    def test_default_points(self):
        assert IntegrationSettings("mcarlo").points == 150
        assert IntegrationSettings("mvaghermite").points == 7
        assert IntegrationSettings("ghermite").points == 7

    def test_gaussian_mean_near_zero(self):
        ns = mc_draws(1, 1000, REDistribution("gaussian"))
        assert abs(ns.nodes.mean()) < 0.02
        assert np.allclose(ns.log_weights, -np.log(1000))

    def test_antithetic_pairs(self):
        ns = mc_draws(2, 100, REDistribution("student_t", 5.0), seed=3)
        assert np.allclose(ns.nodes[:50], -ns.nodes[50:])

    def test_dimension_limit(self):
        with pytest.raises(ModelSpecError):
            mc_draws(21, 100, REDistribution("gaussian"))

    def test_odd_points_rejected_for_t(self):
        with pytest.raises(ModelSpecError, match="even"):
            mc_draws(1, 151, REDistribution("student_t", 4.0))

    def test_minimum_points(self):
        with pytest.raises(ModelSpecError):
            mc_draws(1, 1, REDistribution("gaussian"))


def test_halton_base2_low_discrepancy():
    # at n = 1024 the base-2 sequence is fully stratified; the empirical
    # CDF stays within 2/n of the uniform (Koksma-style bound)
    n = 1024
    u = np.sort(halton(n, 2))
    sup = max(
        np.max(np.abs(np.arange(1, n + 1) / n - u)),
        np.max(np.abs(np.arange(0, n) / n - u)),
    )
    assert sup <= 2.0 / n


def test_halton_deterministic_skip():
    full = halton(30, 3)
    skipped = halton(10, 3, skip=20)
    assert np.allclose(full[20:], skipped)


def test_settings_validation():
    with pytest.raises(ModelSpecError):
        IntegrationSettings("simpson")
    with pytest.raises(ModelSpecError):
        IntegrationSettings(points=0)
    with pytest.raises(ModelSpecError):
        IntegrationSettings(adapt_iterations=2000)
    s = IntegrationSettings()
    assert s.adapt_iterations == 1001
    assert s.adapt_tolerance == 1e-8


def test_shift_to_reference_integrates_density():
    # integral of a N(m, s^2) density under the shifted rule is 1
    base = tensor_nodes(gauss_hermite(15), 1)
    m, s = -0.7, 1.9
    ns = shift_to_reference(base, np.array([m]), np.array([[s]]))
    dens = np.exp(-0.5 * ((ns.nodes[:, 0] - m) / s) ** 2) / (s * np.sqrt(2 * np.pi))
    assert np.exp(ns.log_weights) @ dens == pytest.approx(1.0, abs=1e-12)
