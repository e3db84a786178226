"""Estimation and control factors.

Residual conventions (all Jacobians are w.r.t. right-perturbed tangents, state
tangent order ``[p, theta, v, w]``):

* absolute:  ``[p - z_p, Log(z_R^T R), v - z_v, w - z_w]``
* relative:  ``Log_SE3(T_meas^-1 T_l^-1 T_l+1)``
* dynamics:  body-frame force/moment balance between consecutive states
* reference: ``[p - p_r, v - v_r, Log(R^T R_r)]``
* rate:      ``u_t - u_t+1``
* limit:     hinge that is non-zero within ``u_thr`` of either bound
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fgo import Factor, Gaussian, Values, VariableKey, batch_constant, batch_keys
from .manifold import (
    Pose,
    log_so3,
    pose_compose,
    pose_inverse,
    pose_log,
    right_jacobian_inv,
    se3_adjoint,
    se3_right_jacobian_inv,
    skew,
)
from .quad_model import E3, QuadParams, State, process_covariances

# Nominal observation sigmas: position, rotation, velocity, angular rate
OBS_SIGMAS = (0.20, 0.03, 0.05, 0.001)
REL_SIGMA = 0.03
REF_SIGMAS = (0.03, 0.3, 3.0)  # Q_k: position, velocity, rotation
TERMINAL_REF_SIGMAS = (0.01, 0.3, 3.0)  # Q_N
RATE_SIGMA = 1000.0  # R_t
LIMIT_SIGMA = 10.0  # Q_lim


def block_sigmas(*per_block: float, size: int = 3) -> np.ndarray:
    return np.repeat(np.asarray(per_block, dtype=float), size)


@dataclass(frozen=True)
class AbsoluteObservation:
    """Full-state observation with per-block sigmas ``(p, theta, v, w)``."""

    z: State
    sigmas: tuple = OBS_SIGMAS

    def __post_init__(self):
        if np.any(np.asarray(self.sigmas) <= 0):
            raise ValueError("observation sigmas must be positive")

    @property
    def noise(self) -> Gaussian:
        return Gaussian.from_sigmas(block_sigmas(*self.sigmas))


@dataclass(frozen=True)
class RelativePoseMeasurement:
    T: Pose
    sigmas: np.ndarray = field(default_factory=lambda: np.full(6, REL_SIGMA))

    @property
    def noise(self) -> Gaussian:
        return Gaussian.from_sigmas(self.sigmas)


@dataclass(frozen=True)
class ReferencePoint:
    """Reference position/rotation/velocity and the rotor-speed set-point.

    ``w`` and ``a`` (body rate, world acceleration) are carried for building
    consistent initial states; the reference factor does not use them.
    """

    p: np.ndarray
    R: np.ndarray
    v: np.ndarray
    u: np.ndarray
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def as_state(self) -> State:
        return State(np.array(self.p, float), np.array(self.R, float), np.array(self.v, float), np.array(self.w, float))


@dataclass(frozen=True)
class InputLimits:
    u_min: float = 12000.0
    u_max: float = 18000.0
    u_thr: float = 100.0
    sigma: float = LIMIT_SIGMA

    def __post_init__(self):
        if not self.u_min + self.u_thr < self.u_max - self.u_thr:
            raise ValueError("need u_min + u_thr < u_max - u_thr")
        if self.sigma <= 0:
            raise ValueError("limit sigma must be positive")

    @property
    def lower(self) -> float:
        return self.u_min + self.u_thr

    @property
    def upper(self) -> float:
        return self.u_max - self.u_thr


def _stack(states: Sequence[State]):
    return (
        np.stack([s.p for s in states]),
        np.stack([s.R for s in states]),
        np.stack([s.v for s in states]),
        np.stack([s.w for s in states]),
    )


def _T(R: np.ndarray) -> np.ndarray:
    return np.swapaxes(R, -1, -2)


def _mv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", A, x)


# ---------------------------------------------------------------------------
# positioning factors


def absolute_residual(x: State, z: State) -> np.ndarray:
    return np.concatenate([x.p - z.p, log_so3(z.R.T @ x.R), x.v - z.v, x.w - z.w])


class AbsoluteFactor(Factor):
    """Full-state observation of one state (also used as the MPC initial-state pin)."""

    def __init__(self, key: VariableKey, z: State, noise: Gaussian):
        if noise.dim != 12:
            raise ValueError("absolute factor needs a 12-d noise model")
        self.keys = (key,)
        self.z = z
        self.noise = noise

    @staticmethod
    def from_observation(key: VariableKey, obs: AbsoluteObservation) -> "AbsoluteFactor":
        return AbsoluteFactor(key, obs.z, obs.noise)

    def error(self, values: Values) -> np.ndarray:
        return absolute_residual(values[self.keys[0]], self.z)

    def jacobians(self, values: Values) -> list[np.ndarray]:
        x = values[self.keys[0]]
        J = np.eye(12)
        J[3:6, 3:6] = right_jacobian_inv(log_so3(self.z.R.T @ x.R))
        return [J]

    @classmethod
    def evaluate_batch(cls, factors, values, jacobians):
        P, R, V, W = values.gather_states(batch_keys(factors, 0))
        zP, zR, zV, zW = batch_constant(factors, "z", lambda fs: _stack([f.z for f in fs]))
        e_th = log_so3(_T(zR) @ R)
        r = np.concatenate([P - zP, e_th, V - zV, W - zW], axis=1)
        if not jacobians:
            return r, None
        J = np.tile(np.eye(12), (len(factors), 1, 1))
        J[:, 3:6, 3:6] = right_jacobian_inv(e_th)
        return r, [J]


def _state_pose(x: State) -> Pose:
    return Pose(x.R, x.p)


def relative_residual(T_l: Pose, T_l1: Pose, meas: RelativePoseMeasurement | Pose) -> np.ndarray:
    Tm = meas.T if isinstance(meas, RelativePoseMeasurement) else meas
    est = pose_compose(pose_inverse(T_l), T_l1)
    return pose_log(pose_compose(pose_inverse(Tm), est))


class RelativePoseFactor(Factor):
    """Relative pose between two states (e.g. LiDAR scan matching)."""

    def __init__(self, key_l: VariableKey, key_l1: VariableKey, meas: RelativePoseMeasurement):
        self.keys = (key_l, key_l1)
        self.meas = meas
        self.noise = meas.noise

    def error(self, values: Values) -> np.ndarray:
        a, b = values[self.keys[0]], values[self.keys[1]]
        return relative_residual(_state_pose(a), _state_pose(b), self.meas)

    def jacobians(self, values: Values) -> list[np.ndarray]:
        a, b = values[self.keys[0]], values[self.keys[1]]
        Ta, Tb = _state_pose(a), _state_pose(b)
        r = relative_residual(Ta, Tb, self.meas)
        Jinv = se3_right_jacobian_inv(r)
        d_xib = Jinv
        d_xia = -Jinv @ se3_adjoint(pose_compose(pose_inverse(Tb), Ta))
        out = []
        for d_xi, x in ((d_xia, a), (d_xib, b)):
            J = np.zeros((6, 12))
            J[:, 3:6] = d_xi[:, :3]
            J[:, 0:3] = d_xi[:, 3:] @ x.R.T
            out.append(J)
        return out


# ---------------------------------------------------------------------------
# dynamics factor


def dynamics_residuals(P0, R0, V0, W0, P1, R1, V1, W1, u, params: QuadParams, dt: float,
                       include_drag: bool, jacobians: bool = True):
    """Vectorized dynamics residual over a batch of transitions.

    Returns ``r (n, 12)`` and, if requested, ``(J_xi, J_xi1, J_u)`` with shapes
    ``(n, 12, 12)``, ``(n, 12, 12)``, ``(n, 12, 4)``.
    """
    m = params.mass
    n = P0.shape[0]
    A = params.allocation
    usq = u * u
    thrust = usq @ A[:3].T
    torque = usq @ A[3:].T
    gvec = params.gravity * (params.R_gravity @ E3)
    Rt = _T(R0)

    pp = m * (P1 - V0 * dt + 0.5 * gvec * dt * dt - P0)
    Rt_pp = _mv(Rt, pp)
    e_p = Rt_pp - 0.5 * thrust * dt * dt

    E = Rt @ R1
    th = log_so3(E)
    e_th = th - W0 * dt

    pv = m * (V1 - V0 + gvec * dt)
    Rt_pv = _mv(Rt, pv)
    e_v = Rt_pv - thrust * dt
    if include_drag:
        D = params.drag_sign * params.drag
        Rt_v0 = _mv(Rt, V0)
        e_v = e_v - _mv(D, Rt_v0) * dt

    Ib = params.inertia
    Iw0 = Ib * W0
    e_w = Ib * (W1 - W0) - (torque - np.cross(W0, Iw0)) * dt
    r = np.concatenate([e_p, e_th, e_v, e_w], axis=1)
    if not jacobians:
        return r, None

    Jr_inv = right_jacobian_inv(th)
    Ji = np.zeros((n, 12, 12))
    Ji[:, 0:3, 0:3] = -m * Rt
    Ji[:, 0:3, 3:6] = skew(Rt_pp)
    Ji[:, 0:3, 6:9] = -m * dt * Rt
    Ji[:, 3:6, 3:6] = -Jr_inv @ _T(E)
    Ji[:, 3:6, 9:12] = -dt * np.eye(3)
    Ji[:, 6:9, 3:6] = skew(Rt_pv)
    Ji[:, 6:9, 6:9] = -m * Rt
    if include_drag:
        Ji[:, 6:9, 3:6] -= D @ skew(Rt_v0) * dt
        Ji[:, 6:9, 6:9] -= (D @ Rt) * dt
    Ji[:, 9:12, 9:12] = -np.diag(Ib) + dt * (skew(W0) * Ib[None, None, :] - skew(Iw0))

    Ji1 = np.zeros((n, 12, 12))
    Ji1[:, 0:3, 0:3] = m * Rt
    Ji1[:, 3:6, 3:6] = Jr_inv
    Ji1[:, 6:9, 6:9] = m * Rt
    Ji1[:, 9:12, 9:12] = np.diag(Ib)

    dtau = A[None, :, :] * (2.0 * u)[:, None, :]  # (n, 6, 4)
    Ju = np.zeros((n, 12, 4))
    Ju[:, 0:3] = -0.5 * dt * dt * dtau[:, :3]
    Ju[:, 6:9] = -dt * dtau[:, :3]
    Ju[:, 9:12] = -dt * dtau[:, 3:]
    return r, (Ji, Ji1, Ju)


def dynamics_residual(x_i: State, x_i1: State, u_i: np.ndarray, params: QuadParams, dt: float,
                      include_drag: bool = False):
    """Single-transition wrapper: ``(r, [J_xi, J_xi1, J_u])``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = [arr[None] for arr in (x_i.p, x_i.R, x_i.v, x_i.w, x_i1.p, x_i1.R, x_i1.v, x_i1.w)]
    r, J = dynamics_residuals(*a, np.asarray(u_i, float)[None], params, dt, include_drag)
    return r[0], [j[0] for j in J]


def dynamics_noise(params: QuadParams, dt: float) -> Gaussian:
    return Gaussian.from_covariance(process_covariances(params, dt).full())


class DynamicsFactor(Factor):
    """Links ``x_i``, ``x_i+1`` and ``u_i`` through the discrete quadrotor model."""

    def __init__(self, key_i: VariableKey, key_i1: VariableKey, key_u: VariableKey,
                 params: QuadParams, dt: float, include_drag: bool = False,
                 noise: Gaussian | None = None):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.keys = (key_i, key_i1, key_u)
        self.params = params
        self.dt = dt
        self.include_drag = include_drag
        self.noise = noise if noise is not None else dynamics_noise(params, dt)

    def error(self, values: Values) -> np.ndarray:
        return self.linearize_single(values, False)[0]

    def jacobians(self, values: Values) -> list[np.ndarray]:
        return self.linearize_single(values, True)[1]

    def linearize_single(self, values, jac):
        r, J = self.evaluate_batch([self], values, jac)
        return r[0], (None if J is None else [j[0] for j in J])

    @classmethod
    def evaluate_batch(cls, factors, values, jacobians):
        f0 = factors[0]
        if any(f.params is not f0.params or f.dt != f0.dt or f.include_drag != f0.include_drag
               for f in factors[1:]):
            return Factor.evaluate_batch.__func__(cls, factors, values, jacobians)
        P0, R0, V0, W0 = values.gather_states(batch_keys(factors, 0))
        P1, R1, V1, W1 = values.gather_states(batch_keys(factors, 1))
        u = values.gather_inputs(batch_keys(factors, 2))
        r, J = dynamics_residuals(P0, R0, V0, W0, P1, R1, V1, W1, u, f0.params, f0.dt,
                                  f0.include_drag, jacobians)
        return r, (None if J is None else list(J))


# ---------------------------------------------------------------------------
# control factors


def reference_residual(x: State, ref: ReferencePoint) -> np.ndarray:
    return np.concatenate([x.p - ref.p, x.v - ref.v, log_so3(x.R.T @ ref.R)])


class ReferenceFactor(Factor):
    def __init__(self, key: VariableKey, ref: ReferencePoint, noise: Gaussian):
        if noise.dim != 9:
            raise ValueError("reference factor needs a 9-d noise model")
        self.keys = (key,)
        self.ref = ref
        self.noise = noise

    def error(self, values: Values) -> np.ndarray:
        return reference_residual(values[self.keys[0]], self.ref)

    def jacobians(self, values: Values) -> list[np.ndarray]:
        return [self.evaluate_batch([self], values, True)[1][0][0]]

    @classmethod
    def evaluate_batch(cls, factors, values, jacobians):
        P, R, V, _ = values.gather_states(batch_keys(factors, 0))
        rP, rR, rV = batch_constant(factors, "ref", lambda fs: (
            np.stack([f.ref.p for f in fs]), np.stack([f.ref.R for f in fs]), np.stack([f.ref.v for f in fs])))
        e_th = log_so3(_T(R) @ rR)
        r = np.concatenate([P - rP, V - rV, e_th], axis=1)
        if not jacobians:
            return r, None
        n = len(factors)
        J = np.zeros((n, 9, 12))
        J[:, 0:3, 0:3] = np.eye(3)
        J[:, 3:6, 6:9] = np.eye(3)
        # d/d(delta) Log(Exp(-delta) E) = -Jl^-1(e) = -Jr^-1(-e)
        J[:, 6:9, 3:6] = -right_jacobian_inv(-e_th)
        return r, [J]


def rate_residual(u_t: np.ndarray, u_t1: np.ndarray) -> np.ndarray:
    return np.asarray(u_t, float) - np.asarray(u_t1, float)


class RateFactor(Factor):
    """Penalizes the change between consecutive inputs."""

    def __init__(self, key_t: VariableKey, key_t1: VariableKey, noise: Gaussian):
        self.keys = (key_t, key_t1)
        self.noise = noise

    def error(self, values: Values) -> np.ndarray:
        return rate_residual(values[self.keys[0]], values[self.keys[1]])

    def jacobians(self, values: Values) -> list[np.ndarray]:
        return [np.eye(4), -np.eye(4)]

    @classmethod
    def evaluate_batch(cls, factors, values, jacobians):
        a = values.gather_inputs(batch_keys(factors, 0))
        b = values.gather_inputs(batch_keys(factors, 1))
        if not jacobians:
            return a - b, None
        n = len(factors)
        eye = np.broadcast_to(np.eye(4), (n, 4, 4))
        return a - b, [eye, -eye]


def limit_residual(u: np.ndarray, lim: InputLimits):
    """Hinge residual and its one-sided derivative (0 at the kink)."""
    u = np.asarray(u, dtype=float)
    below = u < lim.lower
    above = u > lim.upper
    r = np.where(below, lim.lower - u, np.where(above, u - lim.upper, 0.0))
    d = np.where(below, -1.0, np.where(above, 1.0, 0.0))
    return r, d


class InputLimitFactor(Factor):
    def __init__(self, key: VariableKey, limits: InputLimits, noise: Gaussian | None = None):
        self.keys = (key,)
        self.limits = limits
        self.noise = noise if noise is not None else Gaussian.from_sigmas(np.full(4, limits.sigma))

    def error(self, values: Values) -> np.ndarray:
        return limit_residual(values[self.keys[0]], self.limits)[0]

    def jacobians(self, values: Values) -> list[np.ndarray]:
        return [np.diag(limit_residual(values[self.keys[0]], self.limits)[1])]

    @classmethod
    def evaluate_batch(cls, factors, values, jacobians):
        lim = factors[0].limits
        if any(f.limits != lim for f in factors[1:]):
            return Factor.evaluate_batch.__func__(cls, factors, values, jacobians)
        u = values.gather_inputs(batch_keys(factors, 0))
        r, d = limit_residual(u, lim)
        if not jacobians:
            return r, None
        J = np.zeros((len(factors), 4, 4))
        idx = np.arange(4)
        J[:, idx, idx] = d
        return r, [J]
