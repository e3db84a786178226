"""CSV serialization of run logs and the down-sampled plotting series."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..manifold import exp_so3, log_so3
from ..sim import RunLog

_XYZ = ("x", "y", "z")


def _cols(prefix: str, n: int = 3) -> list[str]:
    if n == 3:
        return [f"{prefix}_{a}" for a in _XYZ]
    return [f"{prefix}{i + 1}" for i in range(n)]


RUNLOG_COLUMNS: tuple[str, ...] = tuple(
    ["t"]
    + _cols("p_true") + _cols("theta_true") + _cols("v_true") + _cols("omega_true")
    + _cols("p_obs") + _cols("p_est") + _cols("p_ref") + _cols("theta_ref")
    + _cols("u_cmd", 4) + _cols("u_act", 4)
    + ["iters", "cost", "event"]
)

PLOT_COLUMNS: tuple[str, ...] = tuple(
    ["t"] + _cols("p_true") + _cols("p_ref") + _cols("p_obs") + _cols("err") + ["err_norm"] + _cols("rot_err")
)


def _fmt(x) -> str:
    return repr(float(x))


def write_rows(path: str | Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


def runlog_rows(log: RunLog) -> list[list]:
    theta = log.theta_true
    theta_ref = log_so3(log.R_ref, check=False) if len(log) else np.zeros((0, 3))
    rows = []
    for k in range(len(log)):
        row = [log.t[k]]
        for arr in (log.p_true, theta, log.v_true, log.w_true, log.p_obs, log.p_est, log.p_ref, theta_ref,
                    log.u_cmd, log.u_act):
            row.extend(arr[k])
        rows.append(row + [str(int(log.iters[k])), log.cost[k], log.event[k]])
    return rows


def write_runlog(log: RunLog, path: str | Path) -> None:
    write_rows(path, RUNLOG_COLUMNS, runlog_rows(log))


def read_runlog_table(path: str | Path) -> dict[str, np.ndarray]:
    """Columns of a run-log CSV as arrays (``event`` stays a string array)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RUNLOG_COLUMNS:
        raise ValueError(f"{path}: not a run-log CSV (unexpected header)")
    body = rows[1:]
    out = {}
    for j, name in enumerate(RUNLOG_COLUMNS):
        col = [r[j] for r in body]
        out[name] = np.array(col, dtype=object if name == "event" else float)
    return out


def plot_rows(table: dict[str, np.ndarray], every: int = 1) -> list[list[float]]:
    """Every ``every``-th sample of a run-log table as ``PLOT_COLUMNS`` rows:
    true and reference path, observed position, position error and its norm,
    and the rotation error ``Log(R_ref^T R_true)``."""
    if every < 1:
        raise ValueError("every must be >= 1")

    def stack(prefix):
        return np.column_stack([table[c] for c in _cols(prefix)])

    p, pr, po = stack("p_true"), stack("p_ref"), stack("p_obs")
    err = p - pr
    R = exp_so3(stack("theta_true"))
    Rr = exp_so3(stack("theta_ref"))
    rot = log_so3(np.swapaxes(Rr, 1, 2) @ R, check=False)
    rows = []
    for k in range(0, len(p), every):
        rows.append([table["t"][k], *p[k], *pr[k], *po[k], *err[k], float(np.linalg.norm(err[k])), *rot[k]])
    return rows
