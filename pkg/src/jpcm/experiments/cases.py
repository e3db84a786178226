"""Experiment matrix: which (variant, method, seed) runs make up each study,
running them, and the summary CSV."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..control import ControllerKind
from ..sim import simulate_run
from .config import ScenarioConfig
from .metrics import compute_rmse, near_bound_fraction, recovery_time
from .runlog_io import write_runlog

log = logging.getLogger(__name__)

CASE_IDS = ("case1", "case2", "drag", "drag_compensated", "time_constant", "recovery")

METHODS = {
    "mpc_pre": (ControllerKind.MPC, True),
    "mpc": (ControllerKind.MPC, False),
    "jpcm": (ControllerKind.JPCM, False),
    "jpcm_sw": (ControllerKind.JPCM_SW, False),
    "jpcm_drag": (ControllerKind.JPCM_DRAG, False),
}

DEFAULT_METHODS = {
    "case1": ("mpc_pre", "mpc", "jpcm"),
    "case2": ("jpcm", "jpcm_sw"),
    "drag": ("jpcm",),
    "drag_compensated": ("jpcm_drag",),
    "time_constant": ("jpcm",),
    "recovery": ("mpc", "jpcm"),
}

DRAG_LEVELS = (0.0, 0.1, 0.2, 0.3)
TIME_CONSTANTS = (0.010, 0.025, 0.050, 0.060, 0.100)
STABLE_TIME_CONSTANT = 0.050
SW_WINDOW = 10

SUMMARY_COLUMNS = (
    "case", "variant", "method", "seed", "row",
    "pos_rmse_x", "pos_rmse_y", "pos_rmse_z", "rot_rmse_x", "rot_rmse_y", "rot_rmse_z",
    "diverged", "recovery_time", "near_bound_fraction", "u_cmd_min", "u_cmd_max",
    "mean_iterations", "steps", "config_hash",
)
NUMERIC_COLUMNS = SUMMARY_COLUMNS[5:18]


class CaseError(ValueError):
    pass


@dataclass(frozen=True)
class RunSpec:
    case: str
    variant: str
    method: str
    seed: int
    config: ScenarioConfig
    expect_stable: bool = True

    @property
    def stem(self) -> str:
        v = self.variant.replace("=", "").replace(".", "p") or "base"
        return f"{self.case}_{v}_{self.method}_s{self.seed}"


def method_config(cfg: ScenarioConfig, method: str) -> ScenarioConfig:
    """Configuration as seen by ``method`` (noise-free observations for ``mpc_pre``)."""
    if method not in METHODS:
        raise CaseError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    _, precise = METHODS[method]
    if not precise:
        return cfg
    return cfg.with_overrides({
        "noise.position_sigma": 0.0, "noise.rotation_sigma": 0.0, "noise.velocity_sigma": 0.0,
        "noise.omega_sigma": 0.0, "noise.relative_sigma": 0.0,
    })


def _variants(case_id: str, cfg: ScenarioConfig) -> list[tuple[str, ScenarioConfig, bool]]:
    if case_id == "case1":
        return [("", cfg, True)]
    if case_id == "case2":
        return [("", cfg.with_overrides({"horizon.window": max(cfg["horizon.window"], SW_WINDOW)}), True)]
    if case_id == "drag":
        return [(f"D={d:g}", cfg.with_overrides({"quad.drag": d, "sim.plant_drag": True}), True)
                for d in DRAG_LEVELS]
    if case_id == "drag_compensated":
        d = DRAG_LEVELS[-1]
        return [(f"D={d:g}", cfg.with_overrides({"quad.drag": d, "sim.plant_drag": True}), True)]
    if case_id == "time_constant":
        return [(f"tc={tc:g}", cfg.with_overrides({"quad.time_constant": tc}), tc <= STABLE_TIME_CONSTANT)
                for tc in TIME_CONSTANTS]
    if case_id == "recovery":
        c = cfg
        if c["disturbance.displacement_time"] < 0:
            c = c.with_overrides({"disturbance.displacement_time": 0.5})
        # the displacement is judged against a 5 cm tube, so observations are exact
        c = method_config(c, "mpc_pre")
        return [("", c, True)]
    raise CaseError(f"unknown case {case_id!r}; choose from {CASE_IDS}")


def plan_case(case_id: str, cfg: ScenarioConfig, methods: Sequence[str] | None = None,
              seeds: Sequence[int] | None = None) -> list[RunSpec]:
    if case_id not in CASE_IDS:
        raise CaseError(f"unknown case {case_id!r}; choose from {CASE_IDS}")
    methods = tuple(methods) if methods else DEFAULT_METHODS[case_id]
    seeds = tuple(seeds) if seeds else cfg["run.seeds"]
    for m in methods:
        if m not in METHODS:
            raise CaseError(f"unknown method {m!r}; choose from {sorted(METHODS)}")
    specs = []
    for variant, vcfg, stable in _variants(case_id, cfg):
        for m in methods:
            for s in seeds:
                specs.append(RunSpec(case_id, variant, m, int(s), method_config(vcfg, m), stable))
    return specs


@dataclass(frozen=True)
class RunResult:
    spec: RunSpec
    position: np.ndarray
    rotation: np.ndarray
    diverged: bool
    recovery_time: float
    near_bound_fraction: float
    u_cmd_min: float
    u_cmd_max: float
    mean_iterations: float
    steps: int
    reason: str = ""


def execute(spec: RunSpec, log_dir: str | Path | None = None) -> RunResult:
    cfg = spec.config
    sc = cfg.scenario()
    kind, _ = METHODS[spec.method]
    run = simulate_run(sc, kind, spec.seed, cfg.config_hash())
    if log_dir is not None:
        write_runlog(run, Path(log_dir) / f"{spec.stem}.csv")
    warm = cfg["sim.warmup"]
    if len(run) and run.t[-1] >= warm:
        rep = compute_rmse(run, warm)
        pos, rot = rep.position, rep.rotation
    else:
        pos = rot = np.full(3, np.nan)
    t_event = cfg["disturbance.displacement_time"]
    rec = recovery_time(run, t_event) if spec.case == "recovery" and t_event >= 0 else float("nan")
    lim = sc.limits
    u = run.u_cmd
    return RunResult(
        spec=spec, position=pos, rotation=rot, diverged=run.diverged, recovery_time=rec,
        near_bound_fraction=near_bound_fraction(u, lim.u_min, lim.u_max, lim.u_thr),
        u_cmd_min=float(u.min()) if len(u) else float("nan"),
        u_cmd_max=float(u.max()) if len(u) else float("nan"),
        mean_iterations=float(np.mean(run.iters)) if len(run) else float("nan"),
        steps=len(run), reason=run.reason,
    )


def _num(x: float) -> str:
    return repr(float(x))


def _values(r: RunResult) -> list[float]:
    return [*r.position, *r.rotation, float(r.diverged), r.recovery_time, r.near_bound_fraction,
            r.u_cmd_min, r.u_cmd_max, r.mean_iterations, float(r.steps)]


def summary_rows(results: Sequence[RunResult]) -> list[list[str]]:
    """Per-run rows sorted by (variant, method, seed), then mean and std rows
    for each (variant, method) group. ``diverged`` aggregates to a fraction."""
    results = sorted(results, key=lambda r: (r.spec.variant, r.spec.method, r.spec.seed))
    rows = []
    groups: dict = {}
    for r in results:
        s = r.spec
        rows.append([s.case, s.variant, s.method, str(s.seed), "run", *map(_num, _values(r)),
                     s.config.config_hash()])
        groups.setdefault((s.case, s.variant, s.method), []).append(r)
    for (case, variant, method), rs in groups.items():
        vals = np.array([_values(r) for r in rs])
        h = rs[0].spec.config.config_hash()
        with np.errstate(invalid="ignore"):
            rows.append([case, variant, method, "", "mean", *map(_num, vals.mean(axis=0)), h])
            rows.append([case, variant, method, "", "std", *map(_num, vals.std(axis=0)), h])
    return rows


def write_summary(results: Sequence[RunResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(summary_rows(results))


def read_summary(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
            raise ValueError(f"{path}: unexpected summary header")
        out = []
        for row in reader:
            for c in NUMERIC_COLUMNS:
                row[c] = float(row[c])
            out.append(row)
        return out


@dataclass
class CaseResult:
    case: str
    results: list

    def unexpected_divergence(self) -> list[RunResult]:
        return [r for r in self.results if r.diverged and r.spec.expect_stable]


def run_case(case_id: str, cfg: ScenarioConfig, methods: Sequence[str] | None = None,
             seeds: Sequence[int] | None = None, out_dir: str | Path | None = None,
             write_logs: bool = False) -> CaseResult:
    """Run every (variant, method, seed) of a study; write ``summary.csv``
    (and per-run logs under ``runs/``) when ``out_dir`` is given."""
    specs = plan_case(case_id, cfg, methods, seeds)
    log_dir = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if write_logs:
            log_dir = out / "runs"
            log_dir.mkdir(exist_ok=True)
    results = []
    for spec in specs:
        log.info("running %s", spec.stem)
        results.append(execute(spec, log_dir))
    if out_dir is not None:
        write_summary(results, Path(out_dir) / "summary.csv")
    return CaseResult(case_id, results)
