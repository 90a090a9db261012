import numpy as np
import pytest

from bipprune.data import make_blobs
from bipprune.models import build_network, init_params
from bipprune.oracles import (OracleError, ToyBilevel, format_table, gradient_check,
                              ig_contribution_sweep, ig_exact, ig_fd, ig_first_order,
                              ig_objective_fd, make_toy, mixed_partial_check,
                              objective_grad_exact, objective_grad_first_order, rel_error,
                              rel_frobenius, run_gradchecks, solve_lower)


class TestSolveLower:
    def test_linear_closed_form(self):
        tb = ToyBilevel("linear", 1.0, c=np.array([2.0, -4.0]))
        np.testing.assert_allclose(solve_lower(tb, np.ones(2)), [-2.0, 4.0])

    @pytest.mark.parametrize("family", ["linear", "quadratic"])
    def test_zero_mask(self, family):
        tb = make_toy(family, 6, 1.0, seed=0)
        np.testing.assert_array_equal(solve_lower(tb, np.zeros(6)), np.zeros(6))

    def test_quadratic_residual(self, rng):
        tb = make_toy("quadratic", 10, 0.7, seed=2)
        m = rng.uniform(0, 1, 10)
        theta = solve_lower(tb, m)
        assert np.abs(tb.stationarity(m, theta)).max() < 1e-10

    def test_residual_self_check(self):
        tb = make_toy("quadratic", 4, 1.0, seed=0)
        tb.tol = 0.0
        with pytest.raises(OracleError):
            solve_lower(tb, np.ones(4))


class TestImplicitGradient:
    def test_linear_fd_is_first_order(self, rng):
        tb = make_toy("linear", 8, 2.0, seed=1)
        m = rng.uniform(0, 1, 8)
        np.testing.assert_allclose(ig_fd(tb, m), -np.diag(tb.c) / 2.0, atol=1e-9)
        np.testing.assert_allclose(ig_first_order(tb, m), -np.diag(tb.c) / 2.0)

    def test_quadratic_exact_matches_fd(self, rng):
        tb = make_toy("quadratic", 10, 1.0, seed=0)
        m = rng.uniform(0, 1, 10)
        assert rel_frobenius(ig_exact(tb, m), ig_fd(tb, m)) < 1e-5
        # the Hessian-free form is not exact once curvature is present
        assert rel_frobenius(ig_first_order(tb, m), ig_fd(tb, m)) > 1e-2

    def test_permutation_symmetry(self):
        # swapping coordinates 0 and 1 leaves the problem invariant
        A = np.array([[1.0, 1.0, 0.5], [0.3, 0.3, 2.0], [1.0, 1.0, -1.0]])
        tb = ToyBilevel("quadratic", 1.0, A=A, b=np.array([1.0, -1.0, 0.5]))
        m = np.array([0.6, 0.6, 0.2])
        P = np.eye(3)[[1, 0, 2]]
        J = ig_fd(tb, m)
        np.testing.assert_allclose(P @ J, J @ P, atol=1e-9)

    def test_eps_range(self):
        tb = make_toy("linear", 3)
        with pytest.raises(ValueError):
            ig_fd(tb, np.ones(3), eps=1e-2)


class TestObjectiveGradient:
    def test_linear_first_order_is_exact(self, rng):
        tb = make_toy("linear", 10, 1.0, seed=3)
        m = rng.uniform(0, 1, 10)
        assert rel_error(objective_grad_first_order(tb, m), ig_objective_fd(tb, m)) < 1e-6

    def test_quadratic_chain_rule(self, rng):
        tb = make_toy("quadratic", 10, 1.0, seed=3)
        m = rng.uniform(0.1, 1, 10)
        fd = ig_objective_fd(tb, m)
        assert rel_error(objective_grad_exact(tb, m), fd) < 1e-4

    def test_fd_error_shrinks_quadratically(self):
        # central differences on a non-polynomial composition
        tb = make_toy("quadratic", 5, 1.0, seed=4)
        m = np.full(5, 0.5)
        exact = objective_grad_exact(tb, m)
        e1 = np.abs(ig_objective_fd(tb, m, 1e-3) - exact).max()
        e2 = np.abs(ig_objective_fd(tb, m, 5e-4) - exact).max()
        assert 3.0 < e1 / e2 < 5.0

    @pytest.mark.parametrize("family", ["linear", "quadratic"])
    def test_ig_contribution_scales_inverse_gamma(self, family):
        _, sizes, slope = ig_contribution_sweep(family, gammas=(10.0, 100.0, 1000.0))
        assert np.all(np.diff(sizes) < 0)
        assert abs(slope + 1.0) < 0.1


class TestNetworkChecks:
    def test_mixed_partial_mlp_tiny(self, rng):
        net = build_network("mlp-tiny")
        train, _ = make_blobs(2, 20, 2, 2.0, seed=0)
        err = mixed_partial_check(net, init_params(net, 0), rng.uniform(0, 1, net.n),
                                  train.subset(np.arange(12)))
        assert err < 1e-3

    def test_mixed_partial_theta_zero(self, rng):
        net = build_network("mlp-tiny")
        train, _ = make_blobs(2, 20, 2, 2.0, seed=0)
        err = mixed_partial_check(net, np.zeros(net.n), rng.uniform(0, 1, net.n),
                                  train.subset(np.arange(12)))
        assert err < 1e-3

    def test_relu_rejected(self, small_blobs):
        net = build_network("mlp-small", 4, 4)
        with pytest.raises(ValueError):
            mixed_partial_check(net, np.zeros(net.n), np.ones(net.n), small_blobs[0])

    def test_gradient_check(self):
        net = build_network("mlp-tiny")
        train, _ = make_blobs(2, 20, 2, 2.0, seed=0)
        assert gradient_check(net, init_params(net, 1), train) < 1e-5

    def test_gradcheck_table(self):
        results = run_gradchecks(0, draws=2)
        assert all(r.passed for r in results)
        table = format_table(results)
        assert "PASS" in table and "FAIL" not in table
