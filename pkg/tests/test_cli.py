from __future__ import annotations

import numpy as np

from jpcm.experiments.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main
from jpcm.experiments.runlog_io import read_runlog_table

SHORT = ["--duration", "0.05", "--set", "horizon.steps=5", "--set", "sim.warmup=0"]


def test_run_writes_log(tmp_path):
    out = tmp_path / "run.csv"
    assert main(["run", "--method", "mpc_pre", "--seed", "2", "--out", str(out), *SHORT]) == EXIT_OK
    table = read_runlog_table(out)
    assert len(table["t"]) == 5
    np.testing.assert_allclose(table["p_obs_x"], table["p_true_x"])


def test_case_writes_summary(tmp_path):
    code = main(["case", "--id", "case1", "--methods", "mpc", "--seeds", "1", "--out", str(tmp_path), *SHORT])
    assert code == EXIT_OK
    assert (tmp_path / "summary.csv").exists()


def test_config_file_and_errors(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("sim.duration = 0.05\nhorizon.steps = 5\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == EXIT_OK
    cfg.write_text("sim.duraton = 1\n")
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["run", "--set", "noequals"]) == EXIT_CONFIG
    assert main(["run", "--set", "sim.duration=-1"]) == EXIT_CONFIG
    assert main(["case", "--id", "case1", "--methods", "pid", *SHORT]) == EXIT_CONFIG
    assert main(["bogus"]) == EXIT_CONFIG
    assert main(["plot-data", "--log", str(tmp_path / "missing.csv")]) == EXIT_CONFIG


def test_divergence_exit_code(tmp_path):
    args = ["run", "--out", str(tmp_path / "r.csv"), *SHORT, "--duration", "0.1",
            "--set", "disturbance.displacement_time=0.02", "--set", "disturbance.displacement=0,0,8"]
    assert main(args) == EXIT_DIVERGED


def test_check_jacobians_command(capsys):
    assert main(["check-jacobians", "--points", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count(" ok") == 7


def test_plot_data(tmp_path):
    log = tmp_path / "r.csv"
    main(["run", "--out", str(log), *SHORT])
    out = tmp_path / "p.csv"
    assert main(["plot-data", "--log", str(log), "--out", str(out), "--every", "2"]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 1 + 3
