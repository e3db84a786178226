"""Scenario configuration as flat ``key = value`` text with dotted namespaces.

Every key has a type and a default; unknown keys and unparsable values raise
:class:`ConfigError`. ``serialize(parse(text))`` is canonical (sorted keys,
repr-exact floats), so parse/serialize round-trips are idempotent.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from ..control import HorizonConfig, Weights
from ..factors import InputLimits
from ..quad_model import QuadParams
from ..sim import CircleReference, Disturbance, DisturbanceSchedule, NoiseConfig, Scenario
from ..solver import SolverConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _vec3(text: str) -> tuple:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated numbers, got {text!r}")
    return tuple(float(p) for p in parts)


def _names(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _ints(text: str) -> tuple:
    return tuple(int(p) for p in _names(text))


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str = ""


HOVER_SPEED = 10758.0

SCHEMA: dict[str, _Key] = {
    "name": _Key(str, "scenario"),
    # vehicle
    "quad.mass": _Key(float, 1.0, "kg"),
    "quad.gravity": _Key(float, 10.0, "m/s^2"),
    "quad.hover_speed": _Key(float, HOVER_SPEED, "rotor speed at hover; sets c_t"),
    "quad.km_ratio": _Key(float, 0.016, "k_m / c_t"),
    "quad.arm_x": _Key(float, 0.13, "m"),
    "quad.arm_y": _Key(float, 0.13, "m"),
    "quad.inertia": _Key(_vec3, (0.01, 0.01, 0.02), "kg m^2"),
    "quad.drag": _Key(float, 0.0, "D = drag * I"),
    "quad.drag_sign": _Key(float, 1.0),
    "quad.time_constant": _Key(float, 0.01, "actuator lag t_c (s)"),
    "quad.thrust_var": _Key(float, 0.01, "per-rotor thrust variance in the dynamics factor (N^2)"),
    "quad.omega_sigma": _Key(float, 0.02, "rad/s, dynamics factor rotation block"),
    "quad.cov_floor": _Key(float, 1e-6, "floor for zero covariance diagonals"),
    # sensor and process noise of the simulator
    "noise.position_sigma": _Key(float, 0.20),
    "noise.rotation_sigma": _Key(float, 0.03),
    "noise.velocity_sigma": _Key(float, 0.05),
    "noise.omega_sigma": _Key(float, 0.001),
    "noise.relative_sigma": _Key(float, 0.03),
    "noise.thrust_sigma": _Key(float, 0.1, "per-rotor force (N)"),
    "noise.omega_process_sigma": _Key(float, 0.02),
    # factor sigmas
    "weights.obs_position_sigma": _Key(float, 0.20),
    "weights.obs_rotation_sigma": _Key(float, 0.03),
    "weights.obs_velocity_sigma": _Key(float, 0.05),
    "weights.obs_omega_sigma": _Key(float, 0.001),
    "weights.relative_sigma": _Key(float, 0.03),
    "weights.ref_position_sigma": _Key(float, 0.03),
    "weights.ref_velocity_sigma": _Key(float, 0.3),
    "weights.ref_rotation_sigma": _Key(float, 3.0),
    "weights.terminal_position_sigma": _Key(float, 0.01),
    "weights.terminal_velocity_sigma": _Key(float, 0.3),
    "weights.terminal_rotation_sigma": _Key(float, 3.0),
    "weights.rate_sigma": _Key(float, 1000.0),
    "weights.prior_sigma": _Key(float, 1e-6),
    # horizon and limits
    "horizon.window": _Key(int, 1, "M, used by jpcm_sw"),
    "horizon.steps": _Key(int, 20, "N"),
    "horizon.dt": _Key(float, 0.02, "node spacing of the predicted trajectory (s)"),
    "limits.u_min": _Key(float, 12000.0),
    "limits.u_max": _Key(float, 18000.0),
    "limits.u_thr": _Key(float, 100.0),
    "limits.sigma": _Key(float, 10.0),
    # reference
    "circle.radius": _Key(float, 1.5),
    "circle.speed": _Key(float, 5.0),
    "circle.yaw": _Key(str, "heading"),
    # simulation
    "sim.duration": _Key(float, 20.0),
    "sim.control_dt": _Key(float, 0.01),
    "sim.plant_drag": _Key(_bool, False),
    "sim.warmup": _Key(float, 1.0, "RMSE window starts here (s)"),
    "disturbance.displacement_time": _Key(float, -1.0, "negative disables"),
    "disturbance.displacement": _Key(_vec3, (0.0, 0.30, -0.40)),
    "disturbance.wind_time": _Key(float, -1.0, "negative disables"),
    "disturbance.wind_force": _Key(_vec3, (0.0, 0.0, 0.0), "N"),
    "disturbance.wind_duration": _Key(float, 0.0),
    # solver
    "solver.max_iterations": _Key(int, 50),
    "solver.lambda_initial": _Key(float, 1e-4),
    "solver.relative_tolerance": _Key(float, 1e-6),
    "solver.gradient_tolerance": _Key(float, 1e-8),
    "solver.warm_start": _Key(_bool, True),
    # experiment matrix
    "run.methods": _Key(_names, ("mpc_pre", "mpc", "jpcm")),
    "run.seeds": _Key(_ints, (1, 2, 3, 4, 5)),
}


class ScenarioConfig(Mapping):
    """Immutable mapping of every schema key to its typed value."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        vals = {k: spec.default for k, spec in SCHEMA.items()}
        for k, v in (overrides or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            if isinstance(v, str):
                try:
                    v = SCHEMA[k].parse(v)
                except ValueError as e:
                    raise ConfigError(f"{k}: {e}") from None
            elif isinstance(SCHEMA[k].default, float) and isinstance(v, (int, float)) and not isinstance(v, bool):
                v = float(v)
            elif isinstance(SCHEMA[k].default, tuple):
                v = tuple(v)
            vals[k] = v
        self._vals = vals

    def __getitem__(self, key: str):
        return self._vals[key]

    def __iter__(self):
        return iter(sorted(self._vals))

    def __len__(self) -> int:
        return len(self._vals)

    def __eq__(self, other) -> bool:
        return isinstance(other, ScenarioConfig) and self._vals == other._vals

    def __hash__(self):
        return hash(self.serialize())

    def replace(self, **kw) -> "ScenarioConfig":
        """Copy with overrides; keyword ``a__b`` stands for key ``a.b``."""
        return self.with_overrides({k.replace("__", "."): v for k, v in kw.items()})

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ScenarioConfig":
        merged = dict(self._vals)
        merged.update(overrides)
        return ScenarioConfig(merged)

    # -- text -------------------------------------------------------------
    def serialize(self) -> str:
        return "".join(f"{k} = {_fmt(self._vals[k])}\n" for k in self)

    def config_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:12]

    # -- domain objects -----------------------------------------------------
    def params(self) -> QuadParams:
        g = self
        return QuadParams.from_hover_speed(
            g["quad.hover_speed"],
            mass=g["quad.mass"],
            gravity=g["quad.gravity"],
            inertia=np.array(g["quad.inertia"]),
            l_x=g["quad.arm_x"],
            l_y=g["quad.arm_y"],
            drag=g["quad.drag"] * np.eye(3),
            drag_sign=g["quad.drag_sign"],
            t_c=g["quad.time_constant"],
            thrust_var=g["quad.thrust_var"],
            omega_sigma=g["quad.omega_sigma"],
            cov_floor=g["quad.cov_floor"],
            km_ratio=g["quad.km_ratio"],
        )

    def noise(self) -> NoiseConfig:
        g = self
        return NoiseConfig(
            position=g["noise.position_sigma"], rotation=g["noise.rotation_sigma"],
            velocity=g["noise.velocity_sigma"], omega=g["noise.omega_sigma"],
            relative=g["noise.relative_sigma"], thrust=g["noise.thrust_sigma"],
            omega_process=g["noise.omega_process_sigma"],
        )

    def weights(self) -> Weights:
        g = self
        return Weights(
            obs=(g["weights.obs_position_sigma"], g["weights.obs_rotation_sigma"],
                 g["weights.obs_velocity_sigma"], g["weights.obs_omega_sigma"]),
            rel=g["weights.relative_sigma"],
            ref=(g["weights.ref_position_sigma"], g["weights.ref_velocity_sigma"], g["weights.ref_rotation_sigma"]),
            terminal=(g["weights.terminal_position_sigma"], g["weights.terminal_velocity_sigma"],
                      g["weights.terminal_rotation_sigma"]),
            rate=g["weights.rate_sigma"],
            prior=g["weights.prior_sigma"],
        )

    def disturbances(self) -> DisturbanceSchedule:
        g = self
        events = []
        if g["disturbance.displacement_time"] >= 0:
            events.append(Disturbance(g["disturbance.displacement_time"], "displacement",
                                      g["disturbance.displacement"]))
        if g["disturbance.wind_time"] >= 0:
            events.append(Disturbance(g["disturbance.wind_time"], "wind_force", g["disturbance.wind_force"],
                                      g["disturbance.wind_duration"]))
        return DisturbanceSchedule(tuple(events))

    def scenario(self) -> Scenario:
        """Build the simulator scenario; raises :class:`ConfigError` on invalid values."""
        g = self
        try:
            return Scenario(
                params=self.params(),
                noise=self.noise(),
                circle=CircleReference(g["circle.radius"], g["circle.speed"], yaw=g["circle.yaw"]),
                horizon=HorizonConfig(g["horizon.window"], g["horizon.steps"], g["horizon.dt"]),
                limits=InputLimits(g["limits.u_min"], g["limits.u_max"], g["limits.u_thr"], g["limits.sigma"]),
                weights=self.weights(),
                duration=g["sim.duration"],
                disturbances=self.disturbances(),
                plant_drag=g["sim.plant_drag"],
                control_dt=g["sim.control_dt"],
                solver=SolverConfig(
                    max_iterations=g["solver.max_iterations"],
                    lambda_initial=g["solver.lambda_initial"],
                    relative_tolerance=g["solver.relative_tolerance"],
                    gradient_tolerance=g["solver.gradient_tolerance"],
                ),
                warm_start=g["solver.warm_start"],
                name=g["name"],
            )
        except (ValueError, np.linalg.LinAlgError) as e:
            raise ConfigError(str(e)) from None


def parse(text: str) -> ScenarioConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    overrides: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in overrides:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        overrides[key] = value
    return ScenarioConfig(overrides)


def load(path: str | Path) -> ScenarioConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def serialize(cfg: ScenarioConfig) -> str:
    return cfg.serialize()
