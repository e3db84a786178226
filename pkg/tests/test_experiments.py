from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jpcm.experiments.cases import (
    CASE_IDS,
    SUMMARY_COLUMNS,
    CaseError,
    method_config,
    plan_case,
    read_summary,
    run_case,
)
from jpcm.experiments.config import SCHEMA, ConfigError, ScenarioConfig, load, parse
from jpcm.experiments.metrics import compute_rmse, near_bound_fraction, recovery_time
from jpcm.experiments.runlog_io import PLOT_COLUMNS, RUNLOG_COLUMNS, plot_rows, read_runlog_table, write_runlog
from jpcm.manifold import exp_so3
from jpcm.sim import RunLog, simulate_run

SHORT = {"sim.duration": 0.1, "sim.warmup": 0.0, "horizon.steps": 5, "run.seeds": "1"}


def _log(err, dt=0.01, diverged=False):
    err = np.asarray(err, float)
    n = len(err)
    z = np.zeros((n, 3))
    p_true = np.column_stack([err, np.zeros(n), np.zeros(n)])
    R = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    return RunLog("jpcm", 1, dt, np.arange(n) * dt, p_true, R, z, z, z, z, z.copy(), R.copy(),
                  np.zeros((n, 4)), np.zeros((n, 4)), np.zeros(n, int), np.zeros(n), [""] * n, diverged)


# -- config ---------------------------------------------------------------

def test_config_defaults_and_roundtrip(tmp_path):
    cfg = ScenarioConfig()
    assert set(cfg) == set(SCHEMA)
    path = tmp_path / "a.cfg"
    path.write_text(cfg.serialize())
    assert load(path) == cfg
    assert load(path).config_hash() == cfg.config_hash()


@settings(max_examples=40)
@given(st.floats(0.001, 0.5), st.integers(1, 40), st.booleans(),
       st.lists(st.integers(1, 99), min_size=1, max_size=5))
def test_config_roundtrip_property(tc, n, drag, seeds):
    cfg = ScenarioConfig({"quad.time_constant": tc, "horizon.steps": n, "sim.plant_drag": drag,
                          "run.seeds": tuple(seeds)})
    again = parse(cfg.serialize())
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def test_config_parse_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        parse("quad.colour = red")
    with pytest.raises(ConfigError, match="duplicate"):
        parse("sim.duration = 1\nsim.duration = 2")
    with pytest.raises(ConfigError, match="line 1"):
        parse("sim.duration")
    with pytest.raises(ConfigError):
        parse("sim.duration = soon")
    with pytest.raises(ConfigError):
        ScenarioConfig({"sim.duration": -1.0}).scenario()


def test_config_comments_and_overrides():
    cfg = parse("# header\nquad.drag = 0.2  # D = 0.2 I\n\n")
    assert cfg["quad.drag"] == 0.2
    np.testing.assert_allclose(cfg.params().drag, 0.2 * np.eye(3))
    assert cfg.replace(sim__duration=3)["sim.duration"] == 3.0
    assert cfg.config_hash() != ScenarioConfig().config_hash()
    sc = ScenarioConfig().scenario()
    assert sc.params.hover_speed == pytest.approx(10758.0)


# -- metrics --------------------------------------------------------------

def test_rmse_oracle():
    err = np.array([0.0, 3.0, 4.0, -4.0, 3.0])
    rep = compute_rmse(_log(err, dt=0.5), warmup=1.0)
    assert rep.position[0] == pytest.approx(math.sqrt((16 + 16 + 9) / 3))
    assert rep.position[1] == 0.0
    with pytest.raises(ValueError):
        compute_rmse(_log(err), warmup=5.0)


def test_rotation_rmse():
    log = _log(np.zeros(4))
    log.R_true[:] = exp_so3(np.array([0.0, 0.0, 0.1]))
    rep = compute_rmse(log, warmup=0.0)
    np.testing.assert_allclose(rep.rotation, [0.0, 0.0, 0.1], atol=1e-12)


def test_recovery_time():
    err = [0.01] * 5 + [0.5, 0.3, 0.04, 0.06, 0.02, 0.01, 0.01]
    assert recovery_time(_log(err), 0.05) == pytest.approx(0.04)
    assert recovery_time(_log([0.5] * 5), 0.0) == math.inf
    assert recovery_time(_log([0.01] * 5), 0.0) == 0.0
    assert recovery_time(_log([0.01] * 5, diverged=True), 0.0) == math.inf


def test_near_bound_fraction():
    u = np.array([[15000.0] * 4, [12050.0, 15000, 15000, 15000], [15000.0, 15000, 15000, 17990]])
    assert near_bound_fraction(u, 12000, 18000, 100) == pytest.approx(2 / 3)
    assert near_bound_fraction(np.zeros((0, 4)), 12000, 18000, 100) == 0.0


# -- run logs ---------------------------------------------------------------

def test_runlog_csv_roundtrip(tmp_path):
    cfg = ScenarioConfig(SHORT)
    run = simulate_run(cfg.scenario(), "jpcm", 1)
    path = tmp_path / "run.csv"
    write_runlog(run, path)
    table = read_runlog_table(path)
    assert tuple(table) == RUNLOG_COLUMNS
    np.testing.assert_array_equal(table["p_true_x"], run.p_true[:, 0])
    rows = plot_rows(table, every=3)
    assert len(rows) == 4 and len(rows[0]) == len(PLOT_COLUMNS)
    np.testing.assert_allclose([r[13] for r in rows], np.linalg.norm(run.position_error()[::3], axis=1))
    with pytest.raises(ValueError):
        plot_rows(table, every=0)


# -- cases ------------------------------------------------------------------

def test_plans():
    cfg = ScenarioConfig()
    assert len(plan_case("case1", cfg)) == 15
    drag = plan_case("drag", cfg, seeds=[1])
    assert [s.config["quad.drag"] for s in drag] == [0.0, 0.1, 0.2, 0.3]
    assert all(s.config["sim.plant_drag"] for s in drag)
    tc = plan_case("time_constant", cfg, seeds=[1])
    assert [s.expect_stable for s in tc] == [True, True, True, False, False]
    rec = plan_case("recovery", cfg, seeds=[1])
    assert rec[0].config["disturbance.displacement_time"] == 0.5
    assert method_config(cfg, "mpc_pre")["noise.position_sigma"] == 0.0
    with pytest.raises(CaseError):
        plan_case("case9", cfg)
    with pytest.raises(CaseError):
        plan_case("case1", cfg, methods=["pid"])
    assert set(CASE_IDS) >= {"case1", "case2", "recovery"}


def test_summary_is_deterministic(tmp_path):
    cfg = ScenarioConfig(SHORT)
    a = run_case("case1", cfg, ["mpc", "jpcm"], [1, 2], tmp_path / "a")
    run_case("case1", cfg, ["mpc", "jpcm"], [1, 2], tmp_path / "b", write_logs=True)
    sa = (tmp_path / "a" / "summary.csv").read_bytes()
    assert sa == (tmp_path / "b" / "summary.csv").read_bytes()
    assert len(list((tmp_path / "b" / "runs").glob("*.csv"))) == 4
    rows = read_summary(tmp_path / "a" / "summary.csv")
    assert [r["row"] for r in rows] == ["run"] * 4 + ["mean", "std"] * 2
    with open(tmp_path / "a" / "summary.csv", newline="") as fh:
        assert tuple(next(csv.reader(fh))) == SUMMARY_COLUMNS
    assert not a.unexpected_divergence()
