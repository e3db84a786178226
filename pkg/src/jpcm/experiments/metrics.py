"""Tracking metrics computed from a :class:`~jpcm.sim.RunLog`."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..sim import RunLog

DEFAULT_WARMUP = 1.0
TUBE_RADIUS = 0.05


@dataclass(frozen=True)
class RmseReport:
    method: str
    seed: int
    position: np.ndarray  # (3,) m
    rotation: np.ndarray  # (3,) rad
    diverged: bool = False

    def __post_init__(self):
        if np.any(self.position < 0) or np.any(self.rotation < 0):
            raise ValueError("RMSE must be non-negative")


def compute_rmse(log: RunLog, warmup: float = DEFAULT_WARMUP) -> RmseReport:
    """Per-axis RMSE of position and rotation error from ``warmup`` seconds on.

    A diverged run is scored over the steps it completed.
    """
    if warmup < 0:
        raise ValueError("warmup must be non-negative")
    mask = log.t >= warmup - 1e-9
    if not np.any(mask):
        raise ValueError(f"no samples after the {warmup}s warm-up")
    ep = log.position_error()[mask]
    er = log.rotation_error()[mask]
    return RmseReport(
        method=log.method,
        seed=log.seed,
        position=np.sqrt(np.mean(ep**2, axis=0)),
        rotation=np.sqrt(np.mean(er**2, axis=0)),
        diverged=log.diverged,
    )


def recovery_time(log: RunLog, event_time: float, tube: float = TUBE_RADIUS) -> float:
    """Seconds from ``event_time`` until the position error enters ``tube``
    and stays inside it for the rest of the run; ``inf`` if it never does."""
    if log.diverged:
        return float("inf")
    err = np.linalg.norm(log.position_error(), axis=1)
    after = log.t >= event_time - 1e-9
    if not np.any(after):
        raise ValueError("event is after the end of the log")
    t = log.t[after]
    outside = np.flatnonzero(err[after] > tube)
    if len(outside) == 0:
        return 0.0
    last = outside[-1]
    if last + 1 >= len(t):
        return float("inf")
    return float(t[last + 1] - event_time)


def near_bound_fraction(u_cmd: np.ndarray, u_min: float, u_max: float, u_thr: float) -> float:
    """Fraction of steps where any rotor command lies within ``u_thr`` of a bound."""
    u = np.asarray(u_cmd, dtype=float)
    if len(u) == 0:
        return 0.0
    near = (u < u_min + u_thr) | (u > u_max - u_thr)
    return float(np.mean(np.any(near, axis=1)))
