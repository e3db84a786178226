"""Finite-difference verification of every analytic factor Jacobian."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..factors import (
    AbsoluteFactor,
    DynamicsFactor,
    InputLimitFactor,
    InputLimits,
    RateFactor,
    ReferenceFactor,
    ReferencePoint,
    RelativePoseFactor,
    RelativePoseMeasurement,
)
from ..fgo import Factor, Gaussian, U, Values, X, finite_difference_batch
from ..manifold import Pose, exp_so3
from ..quad_model import QuadParams, State

TOLERANCE = 1e-5


@dataclass(frozen=True)
class JacobianCheck:
    factor: str
    points: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def random_rotation(rng: np.random.Generator, max_angle: float = 2.5) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))


def random_state(rng: np.random.Generator) -> State:
    return State(rng.standard_normal(3), random_rotation(rng), 3.0 * rng.standard_normal(3),
                 2.0 * rng.standard_normal(3))


def _near(x: State, rng: np.random.Generator, scale: float = 0.1) -> State:
    return x.retract(scale * rng.standard_normal(12))


def _params() -> QuadParams:
    return QuadParams.from_hover_speed(15000.0, drag=np.diag([0.3, 0.2, 0.1]))


def _sample_inputs(rng: np.random.Generator, lim: InputLimits, margin: float = 1.0) -> np.ndarray:
    """Rotor speeds kept ``margin`` away from the hinge kinks."""
    while True:
        u = rng.uniform(lim.u_min - 500.0, lim.u_max + 500.0, size=4)
        if np.all(np.abs(u - lim.lower) > margin) and np.all(np.abs(u - lim.upper) > margin):
            return u


def _case_absolute(rng, k):
    x = random_state(rng)
    f = AbsoluteFactor(X(k), _near(x, rng), Gaussian.from_sigmas(np.ones(12)))
    return f, {X(k): x}


def _case_relative(rng, k):
    a, b = random_state(rng), random_state(rng)
    T = Pose(random_rotation(rng, 0.5), rng.standard_normal(3))
    f = RelativePoseFactor(X(2 * k), X(2 * k + 1), RelativePoseMeasurement(T))
    return f, {X(2 * k): a, X(2 * k + 1): b}


def _dynamics_case(drag: bool):
    params = _params()

    def make(rng, k):
        x = random_state(rng)
        f = DynamicsFactor(X(2 * k), X(2 * k + 1), U(k), params, 0.01, include_drag=drag)
        return f, {X(2 * k): x, X(2 * k + 1): _near(x, rng), U(k): rng.uniform(12000.0, 18000.0, 4)}
    return make


def _case_reference(rng, k):
    x = random_state(rng)
    r = _near(x, rng, 0.5)
    ref = ReferencePoint(r.p, r.R, r.v, np.full(4, 15000.0))
    f = ReferenceFactor(X(k), ref, Gaussian.from_sigmas(np.ones(9)))
    return f, {X(k): x}


def _case_rate(rng, k):
    f = RateFactor(U(2 * k), U(2 * k + 1), Gaussian.from_sigmas(np.full(4, 1000.0)))
    return f, {U(2 * k): rng.uniform(12000, 18000, 4), U(2 * k + 1): rng.uniform(12000, 18000, 4)}


def _case_limit(rng, k):
    lim = InputLimits()
    return InputLimitFactor(U(k), lim), {U(k): _sample_inputs(rng, lim)}


CASES: dict[str, Callable[[np.random.Generator, int], tuple[Factor, dict]]] = {
    "absolute": _case_absolute,
    "relative_pose": _case_relative,
    "dynamics": _dynamics_case(False),
    "dynamics_drag": _dynamics_case(True),
    "reference": _case_reference,
    "rate": _case_rate,
    "input_limit": _case_limit,
}


def relative_errors(analytic: list[np.ndarray], numeric: list[np.ndarray], floor: float = 1e-6) -> np.ndarray:
    """Per-point worst column-wise relative difference of batched blocks."""
    worst = np.zeros(len(analytic[0]))
    for A, N in zip(analytic, numeric):
        diff = np.linalg.norm(A - N, axis=1)
        scale = np.maximum(np.linalg.norm(N, axis=1), floor)
        worst = np.maximum(worst, (diff / scale).max(axis=1))
    return worst


def check_jacobians(points: int = 200, seed: int = 0, eps: float = 1e-6) -> list[JacobianCheck]:
    """Compare analytic and central-difference Jacobians at random points.

    All points of one factor type are evaluated as a single batch (each point
    owns its variables), which is the same code path the solver uses.
    """
    if points < 1:
        raise ValueError("need at least one evaluation point")
    rng = np.random.default_rng(seed)
    out = []
    for name, make in CASES.items():
        factors, values = [], Values()
        for k in range(points):
            f, v = make(rng, k)
            factors.append(f)
            values.update(v)
        _, analytic = type(factors[0]).evaluate_batch(factors, values, True)
        numeric = finite_difference_batch(factors, values, eps)
        out.append(JacobianCheck(name, points, float(relative_errors(analytic, numeric).max())))
    return out
