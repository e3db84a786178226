"""Closed-loop acceptance criteria.

Runs are shortened to ``DURATION`` seconds (the CLI default is 20 s) so the
whole file finishes in about an hour on one core; the 100 ms time-constant
run keeps the full duration because divergence has to happen inside it.
Each criterion records one PASS/FAIL line, echoed in the terminal summary.
"""
from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import VERDICTS
from jpcm.control import WindowBuffer, build_jpcm, build_mpc
from jpcm.experiments.cases import DRAG_LEVELS, execute, plan_case, run_case
from jpcm.experiments.cli import main
from jpcm.experiments.config import ScenarioConfig
from jpcm.factors import AbsoluteObservation, DynamicsFactor
from jpcm.fgo import U, Values, X
from jpcm.experiments.jacobians import random_state
from jpcm.quad_model import QuadParams, propagate_discrete
from jpcm.sim import circle_reference, sample_absolute
from jpcm.solver import SolverConfig, solve_lm

pytestmark = pytest.mark.acceptance

DURATION = 5.0
FULL_DURATION = 20.0
SEEDS = (1, 2, 3, 4, 5)
BASE = ScenarioConfig({"sim.duration": DURATION})

_cache: dict = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


def results(case_id: str, cfg: ScenarioConfig = BASE, methods=None, variant=None):
    """Executed runs of a case, memoized on (method, seed, config)."""
    out = []
    for spec in plan_case(case_id, cfg, methods, SEEDS):
        if variant is not None and spec.variant != variant:
            continue
        key = (spec.method, spec.seed, spec.config.config_hash(), spec.case == "recovery")
        if key not in _cache:
            _cache[key] = execute(spec)
        out.append(_cache[key])
    return out


def mean_pos(rs):
    return np.mean([r.position for r in rs], axis=0)


def mean_rot(rs):
    return np.mean([r.rotation for r in rs], axis=0)


def fmt(v):
    return "(" + ", ".join(f"{x:.4f}" for x in v) + ")"


def test_1_jacobian_oracle(capsys):
    t0 = time.perf_counter()
    code = main(["check-jacobians", "--points", "200"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    with capsys.disabled():
        print("\n" + out, end="")
    verdict(1, code == 0 and elapsed < 10.0, f"check-jacobians exit {code}, {elapsed:.2f} s (limit 10 s)")


def test_2_dynamics_consistency():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    p = QuadParams().with_drag(0.2)
    dt = 0.01
    factors, values = [], Values()
    for k in range(1000):
        x = random_state(rng)
        u = rng.uniform(12000.0, 18000.0, 4)
        drag = bool(k % 2)
        factors.append(DynamicsFactor(X(2 * k), X(2 * k + 1), U(k), p, dt, include_drag=drag))
        values.update({X(2 * k): x, X(2 * k + 1): propagate_discrete(x, u, dt, p, drag), U(k): u})
    worst = 0.0
    for drag in (False, True):
        fs = [f for f in factors if f.include_drag == drag]
        r, _ = DynamicsFactor.evaluate_batch(fs, values, False)
        worst = max(worst, float(np.abs(r).max()))
    elapsed = time.perf_counter() - t0
    verdict(2, worst < 1e-12 and elapsed < 1.0, f"max |r| = {worst:.2e} over 1000 states, {elapsed:.2f} s")


def test_3_mpc_pre_band():
    rs = results("case1", methods=["mpc_pre"])
    pos, rot = mean_pos(rs), mean_rot(rs)
    ok = np.all(pos <= 0.02) and np.all(rot <= 0.02) and not any(r.diverged for r in rs)
    verdict(3, bool(ok), f"MPC-pre mean pos RMSE {fmt(pos)} m, rot RMSE {fmt(rot)} rad (limit 0.02)")


def test_4_noise_degradation_and_jpcm_advantage():
    pre = mean_pos(results("case1", methods=["mpc_pre"]))
    mpc_rs, jpcm_rs = results("case1", methods=["mpc"]), results("case1", methods=["jpcm"])
    mpc, jpcm = mean_pos(mpc_rs), mean_pos(jpcm_rs)
    mrot, jrot = mean_rot(mpc_rs), mean_rot(jpcm_rs)
    a = bool(np.all(mpc[:2] >= 3.0 * pre[:2]))
    b = bool(np.all(jpcm[:2] <= 0.6 * mpc[:2]))
    c = bool(np.all(jrot[:2] < mrot[:2]))
    verdict(4, a and b and c and not any(r.diverged for r in mpc_rs + jpcm_rs),
            f"(a) MPC/MPC-pre x,y = {mpc[0] / pre[0]:.2f}, {mpc[1] / pre[1]:.2f} (>= 3) {a}; "
            f"(b) JPCM/MPC x,y = {jpcm[0] / mpc[0]:.2f}, {jpcm[1] / mpc[1]:.2f} (<= 0.6) {b}; "
            f"(c) rot x,y JPCM {fmt(jrot[:2])} vs MPC {fmt(mrot[:2])} {c}")


def test_5_sliding_window():
    jpcm = mean_pos(results("case1", methods=["jpcm"]))
    sw_rs = results("case2", methods=["jpcm_sw"])
    sw = mean_pos(sw_rs)
    ratio = sw[:2] / jpcm[:2]
    ok = bool(np.all(ratio <= 1.2) and np.any(ratio <= 1.0)) and not any(r.diverged for r in sw_rs)
    verdict(5, ok, f"JPCM-SW/JPCM x,y = {ratio[0]:.3f}, {ratio[1]:.3f} (<= 1.2, one <= 1.0); "
                   f"SW {fmt(sw)} JPCM {fmt(jpcm)}")


def test_6_equivalence_limit():
    cfg = ScenarioConfig()
    sc = cfg.scenario()
    h, params = sc.horizon, sc.params
    # the limit concerns the optima, so both problems are solved to convergence
    solver = SolverConfig(max_iterations=500, relative_tolerance=1e-12, gradient_tolerance=1e-12)
    rng = np.random.default_rng(6)
    monotone, final = 0, []
    for _ in range(20):
        t = rng.uniform(0.0, 5.0)
        x = sample_absolute(circle_reference(t, sc.circle, params).as_state(), sc.noise, rng).z
        refs = [circle_reference(t + (k + 1) * h.dt, sc.circle, params) for k in range(h.N)]
        g, init = build_mpc(x, refs, params, sc.limits, h, sc.weights)
        u_mpc = solve_lm(g, init, solver)[0][U(0)]
        diffs = []
        for k in range(7):
            w = sc.weights.obs_scaled(10.0**-k)
            win = WindowBuffer(1)
            win.push(t, AbsoluteObservation(x, w.obs))
            g, init = build_jpcm(win, refs, params, sc.limits, h, weights=w)
            diffs.append(float(np.max(np.abs(solve_lm(g, init, solver)[0][U(0)] - u_mpc))))
        monotone += all(b <= a for a, b in zip(diffs, diffs[1:]))
        final.append(diffs[-1])
    ok = monotone == 20 and max(final) < 1.0
    verdict(6, ok, f"monotone on {monotone}/20 states; max |u0 diff| at k=6 = {max(final):.2e} (< 1)")


def test_7_drag():
    xs, diverged = [], False
    for d in DRAG_LEVELS:
        rs = results("drag", methods=["jpcm"], variant=f"D={d:g}")
        diverged |= any(r.diverged for r in rs)
        xs.append(mean_pos(rs)[0])
    comp = results("drag_compensated")
    diverged |= any(r.diverged for r in comp)
    comp_x = mean_pos(comp)[0]
    mono = all(b >= a for a, b in zip(xs, xs[1:]))
    ok = mono and not diverged and comp_x <= 1.5 * xs[0]
    verdict(7, ok, f"JPCM x RMSE over D {list(DRAG_LEVELS)} = {fmt(xs)} non-decreasing {mono}; "
                   f"diverged {diverged}; JPCM-Drag at 0.3 x = {comp_x:.4f} vs 1.5 x {xs[0]:.4f}")


def test_8_time_constant():
    lines, ok = [], True
    for tc in (0.010, 0.025, 0.050):
        rs = results("time_constant", variant=f"tc={tc:g}")
        worst = max(float(np.max(r.position)) for r in rs)
        div = any(r.diverged for r in rs)
        ok &= worst < 0.1 and not div
        lines.append(f"{tc * 1000:g} ms worst axis RMSE {worst:.4f} diverged {div}")
    slow = results("time_constant", BASE.with_overrides({"sim.duration": FULL_DURATION}), variant="tc=0.1")
    n_div = sum(r.diverged for r in slow)
    ok &= n_div == len(slow)
    lines.append(f"100 ms diverged on {n_div}/{len(slow)} seeds within {FULL_DURATION:g} s")
    verdict(8, ok, "; ".join(lines))


def test_9_recovery():
    rec = {m: [r.recovery_time for r in results("recovery", methods=[m])] for m in ("mpc", "jpcm")}
    inside = sum(t <= 4.0 for t in rec["jpcm"])
    faster = all(a < b for a, b in zip(rec["mpc"], rec["jpcm"]))
    ok = inside >= 4 and faster
    verdict(9, ok, f"JPCM recovered within 4 s on {inside}/5 seeds, times {rec['jpcm']}; "
                   f"MPC times {rec['mpc']}; MPC faster on every seed {faster}")


def test_10_input_limits():
    sc = BASE.scenario()
    lim = sc.limits
    rs = {m: results("case1", methods=[m]) for m in ("mpc_pre", "mpc", "jpcm")}
    lo = min(r.u_cmd_min for v in rs.values() for r in v)
    hi = max(r.u_cmd_max for v in rs.values() for r in v)
    bounded = lo >= lim.u_min - 50 and hi <= lim.u_max + 50
    fj = np.mean([r.near_bound_fraction for r in rs["jpcm"]])
    fm = np.mean([r.near_bound_fraction for r in rs["mpc"]])
    verdict(10, bool(bounded and fj < fm),
            f"u_cmd range [{lo:.1f}, {hi:.1f}] within [{lim.u_min - 50:g}, {lim.u_max + 50:g}] {bounded}; "
            f"near-bound fraction JPCM {fj:.4f} vs MPC {fm:.4f}")


def test_11_determinism(tmp_path):
    cfg = ScenarioConfig({"sim.duration": 0.5, "sim.warmup": 0.2})
    run_case("case1", cfg, None, (1, 2), tmp_path / "a")
    run_case("case1", cfg, None, (1, 2), tmp_path / "b")
    a = (tmp_path / "a" / "summary.csv").read_bytes()
    b = (tmp_path / "b" / "summary.csv").read_bytes()
    verdict(11, a == b, f"summary.csv identical across repeats ({len(a)} bytes)")
