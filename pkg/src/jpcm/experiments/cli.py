"""Command-line entry point.

Exit codes: 0 success, 1 divergence where stability was expected, 2 bad
configuration or arguments, 3 internal solver error or failed Jacobian check.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..control import ControllerKind
from ..fgo import GraphError
from ..sim import simulate_run
from ..solver import SolverError
from .cases import CASE_IDS, METHODS, CaseError, method_config, run_case
from .config import ConfigError, ScenarioConfig, load
from .jacobians import TOLERANCE, check_jacobians
from .runlog_io import PLOT_COLUMNS, plot_rows, read_runlog_table, write_rows, write_runlog

log = logging.getLogger("jpcm")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3


def _config(args) -> ScenarioConfig:
    cfg = load(args.config) if args.config else ScenarioConfig()
    overrides = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        overrides[k] = v
    for flag, key in (("drag", "quad.drag"), ("duration", "sim.duration"), ("time_constant", "quad.time_constant")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "drag", None):
        overrides.setdefault("sim.plant_drag", True)
    return cfg.with_overrides(overrides)


def _cmd_run(args) -> int:
    cfg = method_config(_config(args), args.method)
    run = simulate_run(cfg.scenario(), METHODS[args.method][0], args.seed, cfg.config_hash())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_runlog(run, out)
    if run.diverged:
        log.error("run diverged: %s", run.reason)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_case(args) -> int:
    cfg = _config(args)
    methods = [m.strip() for m in args.methods.split(",")] if args.methods else None
    seeds = list(range(1, args.seeds + 1)) if args.seeds else None
    res = run_case(args.id, cfg, methods, seeds, args.out, write_logs=args.logs)
    bad = res.unexpected_divergence()
    for r in bad:
        log.error("%s diverged: %s", r.spec.stem, r.reason)
    return EXIT_DIVERGED if bad else EXIT_OK


def _cmd_check(args) -> int:
    checks = check_jacobians(args.points, args.seed)
    for c in checks:
        print(f"{c.factor:15s} points={c.points} max_rel_error={c.max_error:.3e} "
              f"{'ok' if c.passed else 'FAIL'}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_INTERNAL


def _cmd_plot(args) -> int:
    try:
        table = read_runlog_table(args.log)
    except (OSError, ValueError) as e:
        raise ConfigError(str(e)) from None
    write_rows(args.out, PLOT_COLUMNS, plot_rows(table, args.every))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jpcm", description="Joint positioning/control vs. MPC quadrotor experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="scenario file of 'key = value' lines")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--duration", type=float, help="run length in seconds")
        sp.add_argument("--drag", type=float, help="drag coefficient d for D = d*I (enables plant drag)")
        sp.add_argument("--time-constant", dest="time_constant", type=float, help="actuator time constant (s)")

    r = sub.add_parser("run", help="one closed-loop run; writes the run-log CSV")
    common(r)
    r.add_argument("--method", choices=sorted(METHODS), default="jpcm")
    r.add_argument("--seed", type=int, default=1)
    r.add_argument("--out", default="run.csv")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("case", help="experiment matrix; writes summary.csv")
    common(c)
    c.add_argument("--id", required=True, choices=CASE_IDS)
    c.add_argument("--methods", help="comma-separated subset of " + ",".join(sorted(METHODS)))
    c.add_argument("--seeds", type=int, help="use seeds 1..K")
    c.add_argument("--out", default="results")
    c.add_argument("--logs", action="store_true", help="also write per-run logs under OUT/runs")
    c.set_defaults(func=_cmd_case)

    j = sub.add_parser("check-jacobians", help="analytic vs. finite-difference Jacobians")
    j.add_argument("--points", type=int, default=200)
    j.add_argument("--seed", type=int, default=0)
    j.set_defaults(func=_cmd_check)

    d = sub.add_parser("plot-data", help="down-sample a run log into path/error series")
    d.add_argument("--log", required=True)
    d.add_argument("--out", default="plot.csv")
    d.add_argument("--every", type=int, default=10)
    d.set_defaults(func=_cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CaseError) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (SolverError, GraphError) as e:
        log.error("solver error: %s", e)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
