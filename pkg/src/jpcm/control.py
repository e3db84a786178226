"""Graph builders for MPC and the joint positioning/control model, and the
receding-horizon controller that solves one of them per control cycle.

Index layout: historical states ``x_{-M+1} .. x_0``, predicted states
``x_1 .. x_N`` and inputs ``u_0 .. u_{N-1}``. ``refs[k - 1]`` is the
reference for ``x_k``; ``refs[i].u`` seeds ``u_i``.
"""
from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .factors import (
    OBS_SIGMAS,
    RATE_SIGMA,
    REF_SIGMAS,
    REL_SIGMA,
    TERMINAL_REF_SIGMAS,
    AbsoluteFactor,
    AbsoluteObservation,
    DynamicsFactor,
    InputLimitFactor,
    InputLimits,
    RateFactor,
    ReferenceFactor,
    ReferencePoint,
    RelativePoseFactor,
    RelativePoseMeasurement,
    block_sigmas,
    dynamics_noise,
)
from .fgo import FactorGraph, Gaussian, U, Values, X
from .manifold import exp_so3, log_so3
from .quad_model import QuadParams, State, propagate_discrete
from .solver import SolverConfig, SolverStats, solve_lm

log = logging.getLogger(__name__)

PRIOR_SIGMA = 1e-6


class ControllerKind(str, enum.Enum):
    MPC = "mpc"
    JPCM = "jpcm"
    JPCM_SW = "jpcm_sw"
    JPCM_DRAG = "jpcm_drag"

    @property
    def joint(self) -> bool:
        return self is not ControllerKind.MPC


@dataclass(frozen=True)
class HorizonConfig:
    M: int = 1
    N: int = 20
    dt: float = 0.01

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("need M >= 1 and N >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class Weights:
    """Sigmas of every factor family (see the factors module for defaults)."""

    obs: tuple = OBS_SIGMAS
    rel: float = REL_SIGMA
    ref: tuple = REF_SIGMAS
    terminal: tuple = TERMINAL_REF_SIGMAS
    rate: float = RATE_SIGMA
    prior: float = PRIOR_SIGMA

    def obs_scaled(self, k: float) -> "Weights":
        return Weights(tuple(s * k for s in self.obs), self.rel, self.ref, self.terminal, self.rate, self.prior)


class WindowBuffer:
    """Last ``M`` absolute observations and the relative poses linking them."""

    def __init__(self, M: int):
        if M < 1:
            raise ValueError("window length must be >= 1")
        self.M = M
        self.times: deque = deque(maxlen=M)
        self.obs: deque = deque(maxlen=M)
        self.rel: deque = deque(maxlen=max(M - 1, 1))

    def push(self, t: float, obs: AbsoluteObservation, rel: RelativePoseMeasurement | None = None) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError("observations must be pushed in time order")
        if self.M > 1 and self.obs:
            if rel is None:
                # a gap in the relative chain; restart the window
                self.times.clear()
                self.obs.clear()
                self.rel.clear()
            else:
                self.rel.append(rel)
        self.times.append(t)
        self.obs.append(obs)

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def full(self) -> bool:
        return len(self.obs) == self.M

    def relatives(self) -> list[RelativePoseMeasurement]:
        """Relative measurements between the observations currently held."""
        n = len(self.obs) - 1
        return list(self.rel)[-n:] if n > 0 else []


def rollout(x0: State, inputs: Sequence[np.ndarray], params: QuadParams, dt: float,
            include_drag: bool = False) -> list[State]:
    xs = [x0]
    for u in inputs:
        xs.append(propagate_discrete(xs[-1], u, dt, params, include_drag))
    return xs


def _check_refs(refs: Sequence[ReferencePoint], horizon: HorizonConfig) -> None:
    if len(refs) != horizon.N:
        raise ValueError(f"expected {horizon.N} reference points, got {len(refs)}")


def _add_control(graph: FactorGraph, values: Values, x0: State, refs, params, limits,
                 horizon: HorizonConfig, weights: Weights, include_drag: bool, guess=None) -> None:
    N, dt = horizon.N, horizon.dt
    dyn_noise = dynamics_noise(params, dt)
    q_k = Gaussian.from_sigmas(block_sigmas(*weights.ref))
    q_n = Gaussian.from_sigmas(block_sigmas(*weights.terminal))
    r_t = Gaussian.from_sigmas(np.full(4, weights.rate))
    lim_noise = Gaussian.from_sigmas(np.full(4, limits.sigma))
    if guess is None:
        u_init = [np.array(r.u, dtype=float) for r in refs]
        xs = rollout(x0, u_init, params, dt, include_drag)
    else:
        xs, u_init = guess
        if len(xs) != N + 1 or len(u_init) != N:
            raise ValueError("initial guess does not match the horizon")
    for i in range(N):
        graph.add(DynamicsFactor(X(i), X(i + 1), U(i), params, dt, include_drag, dyn_noise))
        graph.add(ReferenceFactor(X(i + 1), refs[i], q_n if i == N - 1 else q_k))
        graph.add(InputLimitFactor(U(i), limits, lim_noise))
        if i + 1 < N:
            graph.add(RateFactor(U(i), U(i + 1), r_t))
        values[U(i)] = u_init[i]
        values[X(i + 1)] = xs[i + 1]
    values[X(0)] = x0


def build_mpc(x_obs: State, refs: Sequence[ReferencePoint], params: QuadParams, limits: InputLimits,
              horizon: HorizonConfig, weights: Weights = Weights(), include_drag: bool = False, guess=None):
    """MPC with the initial state pinned to the observation by a tight prior.

    ``guess`` optionally replaces the rollout initialization with
    ``(states x_0..x_N, inputs u_0..u_{N-1})``.
    """
    _check_refs(refs, horizon)
    graph, values = FactorGraph(), Values()
    graph.add(AbsoluteFactor(X(0), x_obs, Gaussian.from_sigmas(np.full(12, weights.prior))))
    _add_control(graph, values, x_obs, refs, params, limits, horizon, weights, include_drag, guess)
    return graph, values


def build_jpcm(window: WindowBuffer, refs: Sequence[ReferencePoint], params: QuadParams,
               limits: InputLimits, horizon: HorizonConfig, kind: ControllerKind = ControllerKind.JPCM,
               weights: Weights = Weights(), allow_partial: bool = False, guess=None):
    """Joint graph: absolute/relative factors on the window plus the MPC factors."""
    _check_refs(refs, horizon)
    if kind is ControllerKind.MPC:
        raise ValueError("use build_mpc for the MPC controller")
    if kind is ControllerKind.JPCM_SW and horizon.M < 2:
        raise ValueError("sliding-window JPCM needs M > 1")
    if len(window) == 0 or (not window.full and not allow_partial):
        raise ValueError(f"window holds {len(window)} of {window.M} observations")
    graph, values = FactorGraph(), Values()
    obs = list(window.obs)
    m = len(obs)
    obs_noise = Gaussian.from_sigmas(block_sigmas(*weights.obs))
    for j, o in enumerate(obs):
        idx = j - m + 1
        graph.add(AbsoluteFactor(X(idx), o.z, obs_noise))
        if idx < 0:
            values[X(idx)] = o.z
    rel_noise = Gaussian.from_sigmas(np.full(6, weights.rel))
    for j, r in enumerate(window.relatives()):
        idx = j - m + 1
        graph.add(RelativePoseFactor(X(idx), X(idx + 1), RelativePoseMeasurement(r.T, np.full(6, weights.rel))))
    include_drag = kind is ControllerKind.JPCM_DRAG
    _add_control(graph, values, obs[-1].z, refs, params, limits, horizon, weights, include_drag, guess)
    return graph, values


@dataclass
class StepResult:
    u: np.ndarray
    x0: State
    stats: SolverStats
    values: Values = field(repr=False, default=None)


def _interp_state(a: State, b: State, s: float) -> State:
    dR = exp_so3(s * log_so3(a.R.T @ b.R, check=False))
    return State(a.p + s * (b.p - a.p), a.R @ dR, a.v + s * (b.v - a.v), a.w + s * (b.w - a.w))


def shifted_guess(prev: Values, t_prev: float, t: float, x0: State, params: QuadParams,
                  horizon: HorizonConfig, include_drag: bool = False):
    """Previous solution resampled on the grid starting at ``t``.

    Nodes inside the previous horizon are interpolated (linearly, geodesic
    for rotations); later ones are propagated under the last input. The
    ``x_0`` is replaced by ``x0``.
    """
    N, dt = horizon.N, horizon.dt
    xs_prev = [prev[X(k)] for k in range(N + 1)]
    us_prev = np.array([prev[U(i)] for i in range(N)], dtype=float)
    shift = (t - t_prev) / dt
    grid = np.arange(N)
    us = [np.array([np.interp(shift + i, grid, us_prev[:, j]) for j in range(4)]) for i in range(N)]
    xs = []
    for k in range(N + 1):
        s = shift + k
        j = int(np.floor(s))
        if j + 1 <= N:
            xs.append(_interp_state(xs_prev[j], xs_prev[j + 1], s - j))
        else:
            xs.append(propagate_discrete(xs[-1], us[k - 1], dt, params, include_drag))
    return [x0] + xs[1:], us


class Controller:
    """Receding-horizon controller: one graph build and one LM solve per step.

    With ``warm_start`` the solve starts from the previous cycle's solution
    shifted to the new time instead of the reference-input rollout.
    """

    def __init__(self, kind: ControllerKind, params: QuadParams, limits: InputLimits,
                 horizon: HorizonConfig, reference: Callable[[float], ReferencePoint],
                 weights: Weights = Weights(), solver: SolverConfig | None = None,
                 warm_start: bool = False):
        self.kind = ControllerKind(kind)
        if self.kind is ControllerKind.JPCM_SW and horizon.M < 2:
            raise ValueError("sliding-window JPCM needs M > 1")
        self.params = params
        self.limits = limits
        self.horizon = horizon
        self.reference = reference
        self.weights = weights
        self.solver = solver or SolverConfig()
        self.window = WindowBuffer(horizon.M if self.kind is ControllerKind.JPCM_SW else 1)
        self.warm_start = warm_start
        self.last: StepResult | None = None
        self._prev: tuple | None = None

    def references(self, t: float) -> list[ReferencePoint]:
        dt = self.horizon.dt
        return [self.reference(t + (k + 1) * dt) for k in range(self.horizon.N)]

    def build(self, t: float, obs: AbsoluteObservation, rel: RelativePoseMeasurement | None = None):
        refs = self.references(t)
        drag = self.kind is ControllerKind.JPCM_DRAG
        guess = None
        if self.warm_start and self._prev is not None and t > self._prev[0]:
            guess = shifted_guess(self._prev[1], self._prev[0], t, obs.z, self.params, self.horizon, drag)
        if self.kind is ControllerKind.MPC:
            return build_mpc(obs.z, refs, self.params, self.limits, self.horizon, self.weights, guess=guess)
        self.window.push(t, obs, rel)
        return build_jpcm(self.window, refs, self.params, self.limits, self.horizon, self.kind,
                          self.weights, allow_partial=True, guess=guess)

    def step(self, t: float, obs: AbsoluteObservation, rel: RelativePoseMeasurement | None = None) -> np.ndarray:
        graph, init = self.build(t, obs, rel)
        values, stats = solve_lm(graph, init, self.solver)
        self.last = StepResult(np.array(values[U(0)]), values[X(0)], stats, values)
        self._prev = (t, values)
        return self.last.u
