"""Levenberg-Marquardt on a :class:`~jpcm.fgo.FactorGraph`."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .fgo import FactorGraph, GraphError, Values, _check_dims
from .manifold import NearPiLogError

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The normal equations could not be solved (reports the damping in use)."""

    def __init__(self, msg: str, lam: float | None = None):
        super().__init__(msg if lam is None else f"{msg} (lambda={lam:.3g})")
        self.lam = lam


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    lambda_initial: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    relative_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-8
    lambda_max: float = 1e10
    lambda_min: float = 1e-12
    # "fixed": divide by lambda_down after every accepted step. "gain_ratio":
    # compare the actual cost decrease with the one the linear model
    # predicted and only relax the damping when the model was accurate.
    damping_update: str = "fixed"

    def __post_init__(self):
        for name in ("max_iterations", "lambda_initial", "lambda_up", "relative_tolerance",
                     "gradient_tolerance", "lambda_max", "lambda_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lambda_down < 1 < self.lambda_up:
            raise ValueError("need 0 < lambda_down < 1 < lambda_up")
        if self.damping_update not in ("fixed", "gain_ratio"):
            raise ValueError(f"unknown damping update {self.damping_update!r}")


@dataclass
class SolverStats:
    iterations: int = 0
    rejected: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    costs: list = field(default_factory=list)
    gradient_norm: float = float("nan")
    lam: float = float("nan")
    reason: str = ""


def _solve_damped(st, H, grad, lam):
    """Solve ``(H + lam * diag(H)) dx = -grad`` after Jacobi scaling."""
    if st.use_banded:
        u = st.bandwidth
        diag = H[u].copy()
    else:
        diag = np.diag(H).copy()
    # variables can differ in scale by many orders of magnitude (rotor
    # speeds vs. a pinned prior), so only non-positive entries are replaced
    diag[diag <= 0.0] = 1.0
    s = 1.0 / np.sqrt(diag * (1.0 + lam))
    if st.use_banded:
        A = H * st.band_scale(s)
        A[u] = 1.0  # (d + lam d) * s^2
        y = sla.solveh_banded(A, -grad * s, lower=False, check_finite=False)
    else:
        A = H * np.outer(s, s)
        np.fill_diagonal(A, 1.0)
        c = sla.cho_factor(A, lower=False, check_finite=False, overwrite_a=True)
        y = sla.cho_solve(c, -grad * s, check_finite=False)
    return s * y


def _hess_vec(st, H, x):
    """``H @ x`` for the upper-triangular (dense or banded) storage of H."""
    if st.use_banded:
        u = st.bandwidth
        y = H[u] * x
        for k in range(1, u + 1):
            d = H[u - k, k:]
            y[:-k] += d * x[k:]
            y[k:] += d * x[:-k]
        return y
    U = np.triu(H)
    return U @ x + np.triu(H, 1).T @ x


def solve_lm(graph: FactorGraph, initial: Values, cfg: SolverConfig | None = None):
    """Minimize ``0.5 * sum ||W r||^2`` from ``initial``.

    Returns ``(values, stats)``. States are updated by right perturbation of
    the rotation and addition elsewhere; inputs additively. Accepted steps
    never increase the cost.
    """
    cfg = cfg or SolverConfig()
    if len(graph) == 0:
        raise GraphError("empty graph")
    graph.check_values(initial)
    extra = set(initial) - graph.keys()
    if extra:
        raise GraphError(f"unconstrained variables (no factor): {sorted(extra)}")
    st = graph.structure()
    _check_dims(st, initial)

    values = Values(initial)
    stats = SolverStats()
    lam = cfg.lambda_initial
    lin = st.evaluate(values)
    H, grad, cost = st.normal_equations(lin)
    stats.initial_cost = cost
    stats.costs.append(cost)

    while True:
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < cfg.gradient_tolerance:
            stats.reason = "gradient"
            break
        if stats.iterations >= cfg.max_iterations:
            stats.reason = "max_iterations"
            break
        accepted = False
        near_pi = None
        while not accepted:
            try:
                dx = _solve_damped(st, H, grad, lam)
            except np.linalg.LinAlgError:
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                trial = values.retract(dx, st.ordering)
                try:
                    new_cost = st.cost(trial)
                except NearPiLogError as e:
                    near_pi, new_cost = e, np.inf
                if new_cost <= cost:
                    accepted = True
                    break
            stats.rejected += 1
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                break
        if not accepted:
            if near_pi is not None and stats.iterations == 0:
                raise near_pi
            if dx is None:
                raise SolverError("normal equations not positive definite", lam)
            stats.reason = "lambda"
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        if cfg.damping_update == "gain_ratio":
            Hdx = _hess_vec(st, H, dx)
            predicted = -(grad @ dx) - 0.5 * (dx @ Hdx)
            rho = (cost - new_cost) / predicted if predicted > 0 else 0.0
            if rho > 0.75:
                lam = max(lam * cfg.lambda_down, cfg.lambda_min)
            elif rho < 0.25:
                lam = lam * cfg.lambda_up
        else:
            lam = max(lam * cfg.lambda_down, cfg.lambda_min)
        values = trial
        cost = new_cost
        stats.iterations += 1
        stats.costs.append(cost)
        lin = st.evaluate(values)
        H, grad, cost = st.normal_equations(lin)
        if rel < cfg.relative_tolerance:
            stats.reason = "relative_decrease"
            break

    stats.final_cost = cost
    stats.gradient_norm = float(np.max(np.abs(grad)))
    stats.lam = lam
    return values, stats
