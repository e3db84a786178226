from __future__ import annotations

import numpy as np
import pytest

from jpcm.factors import AbsoluteFactor, RateFactor
from jpcm.fgo import (
    Factor,
    FactorGraph,
    Gaussian,
    GraphError,
    Ordering,
    U,
    Values,
    X,
    finite_difference_batch,
    finite_difference_jacobian,
    linearize,
)
from jpcm.manifold import exp_so3, log_so3
from jpcm.quad_model import State
from jpcm.solver import SolverConfig, SolverError, solve_lm


class LinearFactor(Factor):
    """r = A u - b on one input variable."""

    def __init__(self, key, A, b, sigma=1.0):
        self.keys = (key,)
        self.A, self.b = np.asarray(A, float), np.asarray(b, float)
        self.noise = Gaussian.from_sigmas(np.full(len(b), sigma))

    def error(self, values):
        return self.A @ values[self.keys[0]] - self.b

    def jacobians(self, values):
        return [self.A]


def _state(seed=0):
    rng = np.random.default_rng(seed)
    return State(rng.standard_normal(3), exp_so3(rng.standard_normal(3)), rng.standard_normal(3),
                 rng.standard_normal(3))


def test_keys_and_ordering():
    assert X(3).dim == 12 and U(3).dim == 4
    assert X(1) != U(1)
    o = Ordering([U(0), X(1), X(0)])
    assert o.size == 28
    assert o.state_keys == (X(0), X(1)) and o.input_keys == (U(0),)


def test_gaussian_whitening():
    g = Gaussian.from_sigmas([2.0, 0.5])
    np.testing.assert_allclose(g.whiten(np.array([2.0, 1.0])), [1.0, 2.0])
    cov = np.array([[4.0, 1.0], [1.0, 2.0]])
    g = Gaussian.from_covariance(cov)
    np.testing.assert_allclose(g.covariance, cov, atol=1e-12)


def test_linear_least_squares_matches_lstsq():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((10, 4))
    b = rng.standard_normal(10)
    graph = FactorGraph([LinearFactor(U(0), A, b)])
    values, stats = solve_lm(graph, Values({U(0): np.zeros(4)}), SolverConfig(lambda_initial=1e-10))
    expected = np.linalg.lstsq(A, b, rcond=None)[0]
    np.testing.assert_allclose(values[U(0)], expected, atol=1e-8)
    assert stats.iterations <= 2


def test_prior_at_optimum_needs_no_iterations():
    x = _state()
    graph = FactorGraph([AbsoluteFactor(X(0), x, Gaussian.from_sigmas(np.ones(12)))])
    values, stats = solve_lm(graph, Values({X(0): x}))
    assert stats.iterations == 0
    assert stats.final_cost == pytest.approx(0.0, abs=1e-20)


def test_rotation_prior_converges_on_manifold():
    z = _state(1)
    x0 = State(z.p, z.R @ exp_so3(np.array([0.8, -0.5, 0.3])), z.v, z.w)
    graph = FactorGraph([AbsoluteFactor(X(0), z, Gaussian.from_sigmas(np.ones(12)))])
    values, stats = solve_lm(graph, Values({X(0): x0}))
    np.testing.assert_allclose(log_so3(z.R.T @ values[X(0)].R), 0.0, atol=1e-8)
    assert stats.costs == sorted(stats.costs, reverse=True)


def test_cost_and_linear_system():
    rng = np.random.default_rng(5)
    u0, u1 = rng.uniform(12000, 18000, 4), rng.uniform(12000, 18000, 4)
    f = RateFactor(U(0), U(1), Gaussian.from_sigmas(np.full(4, 1000.0)))
    graph = FactorGraph([f])
    values = Values({U(0): u0, U(1): u1})
    assert graph.error(values) == pytest.approx(f.cost(values))
    lin = linearize(graph, values)
    assert lin.cost == pytest.approx(f.cost(values))


def test_graph_errors():
    x = _state()
    graph = FactorGraph([AbsoluteFactor(X(0), x, Gaussian.from_sigmas(np.ones(12)))])
    with pytest.raises(GraphError):
        solve_lm(graph, Values({}))
    with pytest.raises(GraphError):
        solve_lm(graph, Values({X(0): x, X(1): x}))
    with pytest.raises(GraphError):
        solve_lm(FactorGraph(), Values({}))
    with pytest.raises(GraphError):
        solve_lm(graph, Values({X(0): np.zeros(4)}))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(lambda_down=2.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(damping_update="other")


def test_solver_error_reports_lambda():
    e = SolverError("singular", lam=1e3)
    assert "lambda=1e+03" in str(e)


def test_batched_finite_differences_match_single():
    rng = np.random.default_rng(2)
    factors, values = [], Values()
    for k in range(3):
        x = _state(k)
        z = x.retract(0.1 * rng.standard_normal(12))
        factors.append(AbsoluteFactor(X(k), z, Gaussian.from_sigmas(np.ones(12))))
        values[X(k)] = x
    batch = finite_difference_batch(factors, values)
    for k, f in enumerate(factors):
        np.testing.assert_allclose(batch[0][k], finite_difference_jacobian(f, values)[0], atol=1e-8)
    with pytest.raises(GraphError):
        finite_difference_batch([factors[0], factors[0]], values)
