"""Quadrotor rigid-body model, control allocation, actuator lag and the
process-noise covariances used by the dynamics factor."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .manifold import exp_so3, so3_compose

E3 = np.array([0.0, 0.0, 1.0])
COV_FLOOR = 1e-6


@dataclass(frozen=True, slots=True)
class State:
    """Position (world), rotation body->world, velocity (world), body rate."""

    p: np.ndarray
    R: np.ndarray
    v: np.ndarray
    w: np.ndarray

    @staticmethod
    def from_arrays(p, R, v, w) -> "State":
        return State(
            np.asarray(p, dtype=float).reshape(3),
            np.asarray(R, dtype=float).reshape(3, 3),
            np.asarray(v, dtype=float).reshape(3),
            np.asarray(w, dtype=float).reshape(3),
        )

    @staticmethod
    def hover(p=(0.0, 0.0, 0.0)) -> "State":
        return State.from_arrays(p, np.eye(3), np.zeros(3), np.zeros(3))

    def retract(self, d: np.ndarray) -> "State":
        """Apply a 12-d tangent step ``[dp, dtheta, dv, dw]`` (rotation on the right)."""
        return State(
            self.p + d[0:3],
            so3_compose(self.R, exp_so3(d[3:6])),
            self.v + d[6:9],
            self.w + d[9:12],
        )

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.p))
            and np.all(np.isfinite(self.R))
            and np.all(np.isfinite(self.v))
            and np.all(np.isfinite(self.w))
        )


@dataclass(frozen=True)
class Wrench:
    thrust: np.ndarray  # body frame, only z is non-zero
    torque: np.ndarray


def _default_ct(hover_speed: float = 15000.0, mass: float = 1.0, gravity: float = 10.0) -> float:
    return mass * gravity / (4.0 * hover_speed**2)


_CT = _default_ct()


@dataclass(frozen=True)
class QuadParams:
    """Physical constants of the vehicle.

    ``drag_sign`` multiplies the ``R D R^T v`` term of the translational
    dynamics; +1 (default) adds the term along the velocity, -1 gives a
    force opposing the velocity.
    """

    mass: float = 1.0
    gravity: float = 10.0
    R_gravity: np.ndarray = field(default_factory=lambda: np.eye(3))
    inertia: np.ndarray = field(default_factory=lambda: np.array([0.01, 0.01, 0.02]))
    c_t: float = _CT
    k_m: float = 0.016 * _CT
    l_x: float = 0.13
    l_y: float = 0.13
    drag: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    drag_sign: float = 1.0
    t_c: float = 0.01
    thrust_var: float = 0.01
    omega_sigma: float = 0.02
    cov_floor: float = COV_FLOOR

    def __post_init__(self):
        for name, shape in (("R_gravity", (3, 3)), ("inertia", (3,)), ("drag", (3, 3))):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(shape))
        if self.mass <= 0 or self.c_t <= 0 or self.k_m <= 0:
            raise ValueError("mass, c_t and k_m must be positive")
        if np.any(self.inertia <= 0):
            raise ValueError("inertia must be positive")
        if self.cov_floor <= 0:
            raise ValueError("cov_floor must be positive")
        if self.t_c < 0 or self.thrust_var < 0 or self.omega_sigma < 0:
            raise ValueError("t_c and noise parameters must be non-negative")
        if not np.allclose(self.drag, self.drag.T) or np.linalg.eigvalsh(self.drag).min() < -1e-12:
            raise ValueError("drag matrix must be symmetric positive semidefinite")

    @staticmethod
    def from_hover_speed(hover_speed: float, km_ratio: float = 0.016, **kw) -> "QuadParams":
        """Parameters whose equal-rotor hover speed is ``hover_speed``."""
        if hover_speed <= 0:
            raise ValueError("hover speed must be positive")
        c_t = _default_ct(hover_speed, kw.get("mass", 1.0), kw.get("gravity", 10.0))
        kw.setdefault("k_m", km_ratio * c_t)
        return QuadParams(c_t=c_t, **kw)

    def with_drag(self, d: float) -> "QuadParams":
        return replace(self, drag=d * np.eye(3))

    @property
    def I(self) -> np.ndarray:
        return np.diag(self.inertia)

    @property
    def hover_speed(self) -> float:
        return float(np.sqrt(self.mass * self.gravity / (4.0 * self.c_t)))

    @property
    def torque_ratio(self) -> float:
        """Yaw torque per Newton of rotor thrust (k_m / c_t), in meters."""
        return self.k_m / self.c_t

    @property
    def rotor_positions(self) -> np.ndarray:
        """Rotor positions in the body frame, consistent with the allocation matrix."""
        lx, ly = self.l_x, self.l_y
        return np.array([[lx, -ly, 0.0], [lx, ly, 0.0], [-lx, ly, 0.0], [-lx, -ly, 0.0]])

    @property
    def allocation(self) -> np.ndarray:
        """6x4 map from squared rotor speeds to ``[T_b; M_b]``."""
        ct, km, lx, ly = self.c_t, self.k_m, self.l_x, self.l_y
        return np.array(
            [
                [0.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 0.0],
                [ct, ct, ct, ct],
                [-ct * ly, ct * ly, ct * ly, -ct * ly],
                [-ct * lx, -ct * lx, ct * lx, ct * lx],
                [km, -km, km, -km],
            ]
        )

    @property
    def force_allocation(self) -> np.ndarray:
        """6x4 map from per-rotor thrust forces to ``[T_b; M_b]``."""
        return self.allocation / self.c_t


def allocate(u: np.ndarray, params: QuadParams) -> Wrench:
    """Thrust and torque produced by rotor speeds ``u`` (shape ``(..., 4)``)."""
    u = np.asarray(u, dtype=float)
    tau = (u * u) @ params.allocation.T
    return Wrench(tau[..., :3], tau[..., 3:])


def allocate_forces(forces: np.ndarray, params: QuadParams) -> Wrench:
    """Same as :func:`allocate` but from per-rotor thrust forces (N)."""
    tau = np.asarray(forces, dtype=float) @ params.force_allocation.T
    return Wrench(tau[..., :3], tau[..., 3:])


def thrust_acceleration(x: State, wrench: Wrench, params: QuadParams) -> np.ndarray:
    """Gravity plus rotor thrust, without drag, in world frame."""
    g = params.R_gravity @ E3 * params.gravity
    return -g + x.R @ wrench.thrust / params.mass


def drag_acceleration(x: State, params: QuadParams) -> np.ndarray:
    return params.drag_sign * (x.R @ params.drag @ x.R.T @ x.v) / params.mass


def dynamics_continuous(
    x: State, wrench: Wrench, params: QuadParams, include_drag: bool = False
) -> np.ndarray:
    """Time derivative ``[p_dot, omega, v_dot, omega_dot]`` (12,)."""
    v_dot = thrust_acceleration(x, wrench, params)
    if include_drag:
        v_dot = v_dot + drag_acceleration(x, params)
    Iw = params.inertia * x.w
    w_dot = (wrench.torque - np.cross(x.w, Iw)) / params.inertia
    return np.concatenate([x.v, x.w, v_dot, w_dot])


def propagate_wrench(
    x: State,
    wrench: Wrench,
    dt: float,
    params: QuadParams,
    include_drag: bool = False,
    extra_accel: np.ndarray | None = None,
) -> State:
    """One step of the discrete model the dynamics factor encodes.

    Position takes the second-order term of the thrust/gravity acceleration,
    velocity and body rate are forward Euler, rotation uses the exponential map.
    """
    a = thrust_acceleration(x, wrench, params)
    v_dot = a
    if include_drag:
        v_dot = v_dot + drag_acceleration(x, params)
    if extra_accel is not None:
        v_dot = v_dot + extra_accel
    Iw = params.inertia * x.w
    w_dot = (wrench.torque - np.cross(x.w, Iw)) / params.inertia
    return State(
        x.p + x.v * dt + 0.5 * a * dt * dt,
        so3_compose(x.R, exp_so3(x.w * dt)),
        x.v + v_dot * dt,
        x.w + w_dot * dt,
    )


def propagate_discrete(
    x: State, u: np.ndarray, dt: float, params: QuadParams, include_drag: bool = False
) -> State:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return propagate_wrench(x, allocate(u, params), dt, params, include_drag)


@dataclass(frozen=True)
class DynamicsCovariance:
    thrust: np.ndarray  # P_T
    torque: np.ndarray  # P_M
    position: np.ndarray
    rotation: np.ndarray
    velocity: np.ndarray
    angular: np.ndarray

    def full(self) -> np.ndarray:
        out = np.zeros((12, 12))
        for k, blk in enumerate((self.position, self.rotation, self.velocity, self.angular)):
            out[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] = blk
        return out


def _floor(P: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    P = P.copy()
    d = np.diag(P).copy()
    d[d <= 0.0] = floor
    np.fill_diagonal(P, d)
    return P


def process_covariances(params: QuadParams, dt: float, floor: float | None = None) -> DynamicsCovariance:
    """Noise blocks of the dynamics residual derived from per-rotor thrust noise.

    The yaw-torque entry uses the torque-to-thrust ratio ``k_m / c_t`` so
    that the entry has torque units.
    """
    floor = params.cov_floor if floor is None else floor
    s = params.thrust_var
    P_T = 4.0 * np.diag([0.0, 0.0, s])
    P_M = 4.0 * np.diag([params.l_y**2 * s, params.l_x**2 * s, params.torque_ratio**2 * s])
    rot = (params.omega_sigma * dt) ** 2 * np.eye(3)
    return DynamicsCovariance(
        thrust=P_T,
        torque=P_M,
        position=_floor(0.25 * P_T * dt**4, floor),
        rotation=_floor(rot, floor),
        velocity=_floor(P_T * dt**2, floor),
        angular=_floor(P_M * dt**2, floor),
    )


def actuator_step(u_actual: np.ndarray, u_cmd: np.ndarray, t_c: float, dt: float) -> np.ndarray:
    """Exact discretization of the first-order motor lag over ``dt``."""
    u_cmd = np.asarray(u_cmd, dtype=float)
    if t_c <= 0.0:
        return u_cmd.copy()
    return u_cmd + (np.asarray(u_actual, dtype=float) - u_cmd) * np.exp(-dt / t_c)


def hover_input(params: QuadParams) -> np.ndarray:
    return np.full(4, params.hover_speed)
