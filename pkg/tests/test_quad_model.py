from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from jpcm.manifold import exp_so3
from jpcm.quad_model import (
    QuadParams,
    State,
    actuator_step,
    allocate,
    dynamics_continuous,
    hover_input,
    process_covariances,
    propagate_discrete,
)


def test_default_hover_speed():
    p = QuadParams()
    assert p.hover_speed == pytest.approx(15000.0)
    assert QuadParams.from_hover_speed(10758.0).hover_speed == pytest.approx(10758.0)
    assert p.torque_ratio == pytest.approx(0.016)


def test_hover_is_fixed_point():
    p = QuadParams()
    x = State.hover((1.0, 2.0, 3.0))
    y = propagate_discrete(x, hover_input(p), 0.01, p)
    np.testing.assert_allclose(y.p, x.p, atol=1e-14)
    np.testing.assert_allclose(y.v, 0.0, atol=1e-14)
    np.testing.assert_allclose(y.w, 0.0, atol=1e-14)


def test_torques_match_rotor_cross_products():
    p = QuadParams()
    rng = np.random.default_rng(0)
    u = rng.uniform(12000, 18000, 4)
    f = p.c_t * u**2
    wrench = allocate(u, p)
    M = sum(np.cross(r, [0.0, 0.0, fi]) for r, fi in zip(p.rotor_positions, f))
    np.testing.assert_allclose(wrench.torque[:2], M[:2], rtol=1e-12)
    np.testing.assert_allclose(wrench.thrust, [0.0, 0.0, f.sum()])
    # rotors 1 and 3 share a spin direction
    assert wrench.torque[2] == pytest.approx(p.k_m * (u[0] ** 2 - u[1] ** 2 + u[2] ** 2 - u[3] ** 2))


@given(st.floats(0.001, 0.2), st.floats(0.001, 0.05))
def test_actuator_step_matches_ode(t_c, dt):
    u0, uc = np.array([12000.0, 13000, 14000, 15000]), np.full(4, 16000.0)
    sol = solve_ivp(lambda t, u: (uc - u) / t_c, (0, dt), u0, rtol=1e-11, atol=1e-8)
    np.testing.assert_allclose(actuator_step(u0, uc, t_c, dt), sol.y[:, -1], rtol=1e-8)


def test_actuator_without_lag():
    np.testing.assert_allclose(actuator_step(np.zeros(4), np.ones(4), 0.0, 0.01), 1.0)


def test_constant_thrust_matches_integration():
    # no torque, no body rate: the discrete step is exact
    p = QuadParams()
    R = exp_so3(np.array([0.2, -0.1, 0.4]))
    x = State(np.array([0.5, 0.0, 1.0]), R, np.array([1.0, -2.0, 0.5]), np.zeros(3))
    u = np.full(4, 15500.0)
    dt = 0.05

    def f(t, s):
        xs = State(s[0:3], R, s[3:6], np.zeros(3))
        d = dynamics_continuous(xs, allocate(u, p), p)
        return np.concatenate([d[0:3], d[6:9]])

    sol = solve_ivp(f, (0, dt), np.concatenate([x.p, x.v]), rtol=1e-12, atol=1e-12)
    y = propagate_discrete(x, u, dt, p)
    np.testing.assert_allclose(y.p, sol.y[0:3, -1], atol=1e-10)
    np.testing.assert_allclose(y.v, sol.y[3:6, -1], atol=1e-10)
    np.testing.assert_allclose(y.R, R, atol=1e-15)


def test_drag_term():
    p = QuadParams().with_drag(0.3)
    x = State(np.zeros(3), np.eye(3), np.array([1.0, 0.0, 0.0]), np.zeros(3))
    u = hover_input(p)
    y0 = propagate_discrete(x, u, 0.01, p)
    y1 = propagate_discrete(x, u, 0.01, p, include_drag=True)
    np.testing.assert_allclose(y1.v - y0.v, [0.3 * 0.01, 0.0, 0.0], atol=1e-14)


def test_covariances_positive_definite():
    cov = process_covariances(QuadParams(), 0.02)
    assert np.all(np.linalg.eigvalsh(cov.full()) > 0)
    assert cov.velocity[2, 2] == pytest.approx(4 * 0.01 * 0.02**2)


def test_parameter_validation():
    with pytest.raises(ValueError):
        QuadParams(mass=0.0)
    with pytest.raises(ValueError):
        QuadParams(drag=np.diag([-1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        QuadParams.from_hover_speed(-1.0)
    with pytest.raises(ValueError):
        propagate_discrete(State.hover(), hover_input(QuadParams()), 0.0, QuadParams())
