"""Closed-loop simulation: circle reference, plant with actuator lag and
process noise, sensor sampling, disturbances and the per-step run log."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .control import Controller, ControllerKind, HorizonConfig, Weights
from .factors import AbsoluteObservation, InputLimits, ReferencePoint, RelativePoseMeasurement
from .fgo import GraphError
from .manifold import NearPiLogError, Pose, exp_so3, log_so3, pose_compose, pose_exp, pose_inverse
from .quad_model import E3, QuadParams, State, actuator_step, allocate_forces, propagate_wrench
from .solver import SolverConfig, SolverError

log = logging.getLogger(__name__)

DIVERGENCE_RADIUS = 5.0


@dataclass(frozen=True)
class CircleReference:
    """Constant-speed horizontal circle.

    ``yaw`` is ``"heading"`` (body x along the velocity) or ``"fixed"``
    (yaw 0). With zero speed the reference is a hover point.
    """

    radius: float = 1.5
    speed: float = 5.0
    center: tuple = (0.0, 0.0, 0.0)
    yaw: str = "heading"

    def __post_init__(self):
        if self.radius <= 0 or self.speed < 0:
            raise ValueError("need radius > 0 and speed >= 0")
        if self.yaw not in ("heading", "fixed"):
            raise ValueError(f"unknown yaw policy {self.yaw!r}")

    @property
    def rate(self) -> float:
        return self.speed / self.radius


def _kinematics(t: float, cfg: CircleReference):
    W, r = cfg.rate, cfg.radius
    c, s = np.cos(W * t), np.sin(W * t)
    p = np.asarray(cfg.center, float) + r * np.array([c, s, 0.0])
    v = r * W * np.array([-s, c, 0.0])
    a = -r * W * W * np.array([c, s, 0.0])
    return p, v, a


def _attitude(t: float, cfg: CircleReference, params: QuadParams) -> np.ndarray:
    _, _, a = _kinematics(t, cfg)
    z = a + params.gravity * (params.R_gravity @ E3)
    z = z / np.linalg.norm(z)
    psi = cfg.rate * t + np.pi / 2 if cfg.yaw == "heading" else 0.0
    xc = np.array([np.cos(psi), np.sin(psi), 0.0])
    y = np.cross(z, xc)
    y /= np.linalg.norm(y)
    return np.column_stack([np.cross(y, z), y, z])


def reference_input(a: np.ndarray, params: QuadParams) -> np.ndarray:
    """Equal rotor speeds producing the thrust magnitude the acceleration needs."""
    f = params.mass * np.linalg.norm(a + params.gravity * (params.R_gravity @ E3))
    return np.full(4, np.sqrt(f / (4.0 * params.c_t)))


def circle_reference(t: float, cfg: CircleReference, params: QuadParams) -> ReferencePoint:
    if t < 0:
        raise ValueError("t must be non-negative")
    p, v, a = _kinematics(t, cfg)
    R = _attitude(t, cfg, params)
    h = 1e-5
    Rm, Rp = _attitude(max(t - h, 0.0), cfg, params), _attitude(t + h, cfg, params)
    w = log_so3(Rm.T @ Rp) / (t + h - max(t - h, 0.0))
    return ReferencePoint(p, R, v, reference_input(a, params), w=w, a=a, t=t)


@dataclass(frozen=True)
class Disturbance:
    time: float
    kind: str  # "displacement" or "wind_force"
    vector: tuple
    duration: float = 0.0  # wind only

    def __post_init__(self):
        if self.kind not in ("displacement", "wind_force"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.time < 0:
            raise ValueError("disturbance time must be non-negative")


@dataclass(frozen=True)
class DisturbanceSchedule:
    events: tuple = ()

    @staticmethod
    def recovery(time: float = 0.5, dp=(0.0, 0.30, -0.40)) -> "DisturbanceSchedule":
        return DisturbanceSchedule((Disturbance(time, "displacement", tuple(dp)),))

    def validate(self, duration: float) -> None:
        for e in self.events:
            if e.time > duration:
                raise ValueError(f"disturbance at {e.time}s is after the run ends ({duration}s)")

    def displacement_at(self, k: int, dt: float) -> np.ndarray | None:
        hits = [e for e in self.events if e.kind == "displacement" and _step_of(e.time, dt) == k]
        if not hits:
            return None
        return np.sum([np.asarray(e.vector, float) for e in hits], axis=0)

    def wind_at(self, t: float) -> np.ndarray:
        f = np.zeros(3)
        for e in self.events:
            if e.kind == "wind_force" and e.time <= t < e.time + e.duration:
                f += np.asarray(e.vector, float)
        return f


def _step_of(time: float, dt: float) -> int:
    return int(round(time / dt))


@dataclass(frozen=True)
class NoiseConfig:
    position: float = 0.20
    rotation: float = 0.03
    velocity: float = 0.05
    omega: float = 0.001
    relative: float = 0.03
    thrust: float = 0.1  # per-rotor force sigma (N)
    omega_process: float = 0.02

    def __post_init__(self):
        if min(self.position, self.rotation, self.velocity, self.omega, self.relative,
               self.thrust, self.omega_process) < 0:
            raise ValueError("noise sigmas must be non-negative")

    @property
    def obs_sigmas(self) -> tuple:
        return (self.position, self.rotation, self.velocity, self.omega)

    def precise(self) -> "NoiseConfig":
        """Same process noise, noiseless observations."""
        return replace(self, position=0.0, rotation=0.0, velocity=0.0, omega=0.0, relative=0.0)


def plant_step(x: State, u_actual: np.ndarray, u_cmd: np.ndarray, params: QuadParams, noise: NoiseConfig,
               dt: float, rng: np.random.Generator, include_drag: bool = False,
               wind: np.ndarray | None = None):
    """Advance the true vehicle one control period.

    Rotor speeds follow the first-order lag; the speed applied during the
    period is the lag's average over it. Each rotor's force gets
    ``N(0, thrust^2)`` noise and the body rate gets ``N(0, omega_process^2)``
    after propagation.
    """
    u0 = np.asarray(u_actual, float)
    uc = np.asarray(u_cmd, float)
    u1 = np.maximum(actuator_step(u0, uc, params.t_c, dt), 0.0)
    if params.t_c > 0:
        k = params.t_c / dt * (1.0 - np.exp(-dt / params.t_c))
        u_mean = np.maximum(uc + (u0 - uc) * k, 0.0)
    else:
        u_mean = u1
    forces = params.c_t * u_mean**2 + noise.thrust * rng.standard_normal(4)
    extra = None if wind is None or not np.any(wind) else np.asarray(wind, float) / params.mass
    x1 = propagate_wrench(x, allocate_forces(forces, params), dt, params, include_drag, extra)
    w = x1.w + noise.omega_process * rng.standard_normal(3)
    return State(x1.p, x1.R, x1.v, w), u1


def sample_absolute(x: State, noise: NoiseConfig, rng: np.random.Generator,
                    factor_sigmas: Sequence[float] | None = None) -> AbsoluteObservation:
    """Noisy full-state observation.

    ``factor_sigmas`` sets the sigmas carried with the observation (what
    the estimator assumes); it defaults to the sampling sigmas, with zeros
    replaced by the nominal observation sigmas.
    """
    n = rng.standard_normal(12)
    z = State(
        x.p + noise.position * n[0:3],
        x.R @ exp_so3(noise.rotation * n[3:6]),
        x.v + noise.velocity * n[6:9],
        x.w + noise.omega * n[9:12],
    )
    if factor_sigmas is None:
        factor_sigmas = tuple(s if s > 0 else d for s, d in zip(noise.obs_sigmas, NoiseConfig().obs_sigmas))
    return AbsoluteObservation(z, tuple(factor_sigmas))


def sample_relative(x_l: State, x_l1: State, noise: NoiseConfig, rng: np.random.Generator) -> RelativePoseMeasurement:
    T_true = pose_compose(pose_inverse(Pose(x_l.R, x_l.p)), Pose(x_l1.R, x_l1.p))
    n = noise.relative * rng.standard_normal(6)
    sig = noise.relative if noise.relative > 0 else NoiseConfig().relative
    return RelativePoseMeasurement(pose_compose(T_true, pose_exp(n)), np.full(6, sig))


@dataclass(frozen=True)
class Scenario:
    """Everything one closed-loop run needs besides the method and the seed."""

    params: QuadParams = field(default_factory=QuadParams)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    circle: CircleReference = field(default_factory=CircleReference)
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    limits: InputLimits = field(default_factory=InputLimits)
    weights: Weights = field(default_factory=Weights)
    duration: float = 20.0
    disturbances: DisturbanceSchedule = field(default_factory=DisturbanceSchedule)
    plant_drag: bool = False
    control_dt: float = 0.01
    solver: SolverConfig = field(default_factory=SolverConfig)
    warm_start: bool = False
    name: str = "scenario"

    def __post_init__(self):
        if self.duration <= 0 or self.control_dt <= 0:
            raise ValueError("duration and control_dt must be positive")
        self.disturbances.validate(self.duration)

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.control_dt))


@dataclass
class RunLog:
    """Per-step arrays of a closed-loop run (row ``k`` is time ``k * dt``)."""

    method: str
    seed: int
    dt: float
    t: np.ndarray
    p_true: np.ndarray
    R_true: np.ndarray
    v_true: np.ndarray
    w_true: np.ndarray
    p_obs: np.ndarray
    p_est: np.ndarray
    p_ref: np.ndarray
    R_ref: np.ndarray
    u_cmd: np.ndarray
    u_act: np.ndarray
    iters: np.ndarray
    cost: np.ndarray
    event: list
    diverged: bool = False
    reason: str = ""
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.t)

    @property
    def theta_true(self) -> np.ndarray:
        return log_so3(self.R_true, check=False)

    def position_error(self) -> np.ndarray:
        return self.p_true - self.p_ref

    def rotation_error(self) -> np.ndarray:
        return log_so3(np.swapaxes(self.R_ref, 1, 2) @ self.R_true, check=False)


def _rng_streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def simulate_run(scenario: Scenario, method: ControllerKind | str, seed: int, config_hash: str = "") -> RunLog:
    """Run the closed loop; divergence is recorded in the log, not raised."""
    kind = ControllerKind(method)
    sc = scenario
    dt = sc.control_dt
    params = sc.params
    model = params if kind is ControllerKind.JPCM_DRAG else replace(params, drag=np.zeros((3, 3)))
    horizon = sc.horizon if kind is ControllerKind.JPCM_SW else replace(sc.horizon, M=1)

    def ref(t):
        return circle_reference(t, sc.circle, params)

    ctrl = Controller(kind, model, sc.limits, horizon, ref, sc.weights, sc.solver, sc.warm_start)
    rng_proc, rng_obs, rng_rel = _rng_streams(seed)

    r0 = ref(0.0)
    x = r0.as_state()
    u_act = r0.u.copy()
    x_prev = None
    K = sc.steps
    rows = {k: [] for k in ("t", "p_true", "R_true", "v_true", "w_true", "p_obs", "p_est", "p_ref", "R_ref",
                            "u_cmd", "u_act", "iters", "cost")}
    events = []
    diverged, reason = False, ""
    for k in range(K):
        t = k * dt
        tag = ""
        dp = sc.disturbances.displacement_at(k, dt)
        if dp is not None:
            x = State(x.p + dp, x.R, x.v, x.w)
            tag = "displacement"
        rk = ref(t)
        obs = sample_absolute(x, sc.noise, rng_obs)
        rel = sample_relative(x_prev, x, sc.noise, rng_rel) if x_prev is not None else None
        try:
            u_cmd = ctrl.step(t, obs, rel)
        except (SolverError, NearPiLogError, GraphError, np.linalg.LinAlgError) as e:
            diverged, reason = True, f"solver: {e}"
        if not diverged and not np.all(np.isfinite(u_cmd)):
            diverged, reason = True, "non-finite command"
        if diverged:
            break
        res = ctrl.last
        rows["t"].append(t)
        rows["p_true"].append(x.p)
        rows["R_true"].append(x.R)
        rows["v_true"].append(x.v)
        rows["w_true"].append(x.w)
        rows["p_obs"].append(obs.z.p)
        rows["p_est"].append(res.x0.p)
        rows["p_ref"].append(rk.p)
        rows["R_ref"].append(rk.R)
        rows["u_cmd"].append(u_cmd)
        rows["u_act"].append(u_act)
        rows["iters"].append(res.stats.iterations)
        rows["cost"].append(res.stats.final_cost)
        events.append(tag)
        x_prev = x
        x, u_act = plant_step(x, u_act, u_cmd, params, sc.noise, dt, rng_proc, sc.plant_drag,
                              sc.disturbances.wind_at(t))
        err = np.linalg.norm(x.p - ref(t + dt).p)
        if not x.is_finite() or err > DIVERGENCE_RADIUS:
            diverged, reason = True, f"position error {err:.3g} m at t={t + dt:.2f}s"
            break
    if diverged:
        log.info("%s seed %d diverged: %s", kind.value, seed, reason)

    def arr(name, shape):
        return np.array(rows[name], dtype=float).reshape((-1,) + shape)

    return RunLog(
        method=kind.value, seed=seed, dt=dt, t=arr("t", ()),
        p_true=arr("p_true", (3,)), R_true=arr("R_true", (3, 3)), v_true=arr("v_true", (3,)),
        w_true=arr("w_true", (3,)), p_obs=arr("p_obs", (3,)), p_est=arr("p_est", (3,)),
        p_ref=arr("p_ref", (3,)), R_ref=arr("R_ref", (3, 3)), u_cmd=arr("u_cmd", (4,)),
        u_act=arr("u_act", (4,)), iters=np.array(rows["iters"], dtype=int), cost=arr("cost", ()),
        event=events, diverged=diverged, reason=reason, config_hash=config_hash,
    )
