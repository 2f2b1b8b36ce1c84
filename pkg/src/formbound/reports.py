from __future__ import annotations
import csv
import json
import logging
import os
from typing import Dict, Iterable, List, Optional

import pandas as pd

from .core import write_field_csv
from .errors import FormboundError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

SUMMARY_HEADER = [
    "command",
    "quantity",
    "value",
    "reference",
    "tolerance",
    "passed",
    "notes",
]


def _fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return "" if value is None else str(value)
    if isinstance(value, float):
        return FLOAT_FORMAT % value
    return str(value)


def write_table(df: pd.DataFrame, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def append_summary_row(path: str, row: Dict):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    exists = os.path.exists(path)
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_HEADER)
        if not exists:
            w.writeheader()
        w.writerow({k: _fmt(row.get(k)) for k in SUMMARY_HEADER})


def summary_rows(command: str, checks: Iterable[Dict]) -> List[Dict]:
    """Fill in the command column of a batch of check rows."""
    return [dict(check, command=command) for check in checks]


def append_decision(path: str, decision: Dict):
    """Append one gate decision to a JSON list, creating the file on first use."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    try:
        if os.path.exists(path):
            with open(path, "r") as f:
                log = json.load(f)
        else:
            log = []
    except (OSError, json.JSONDecodeError):
        logger.warning("decision log %s unreadable, starting a new one", path)
        log = []
    log.append(decision)
    with open(path, "w") as f:
        json.dump(log, f, indent=2)


def error_record(exc: BaseException, exit_code: Optional[int] = None) -> Dict:
    if isinstance(exc, FormboundError):
        code = exc.exit_code if exit_code is None else exit_code
        details = exc.details()
    else:
        code = 2 if exit_code is None else exit_code
        details = {"path": getattr(exc, "filename", None)} if isinstance(exc, FileNotFoundError) else {}
    return {"error": type(exc).__name__, "message": str(exc), "exit_code": int(code), "details": details}


def write_solve_result(res, out_dir: str, stem: str = "") -> Dict[str, str]:
    prefix = f"{stem}_" if stem else ""
    paths = {
        "u": write_field_csv(res.u, os.path.join(out_dir, f"{prefix}u.csv")),
        "energy": write_table(pd.DataFrame({"iteration": range(len(res.energy_trace)), "energy": res.energy_trace}),
                              os.path.join(out_dir, f"{prefix}energy_trace.csv")),
        "summary": write_table(pd.DataFrame([res.summary()]), os.path.join(out_dir, f"{prefix}solve_summary.csv")),
    }
    if res.harnack:
        df = pd.DataFrame([{"center": b.center, "radius": b.radius, "ratio": r} for b, r in res.harnack])
        paths["harnack"] = write_table(df, os.path.join(out_dir, f"{prefix}harnack.csv"))
    return paths


def write_trace(trace, out_dir: str) -> Dict[str, str]:
    paths = {
        "levels": write_table(trace.summary(), os.path.join(out_dir, "levels.csv")),
        "energies": write_table(trace.energies.rows, os.path.join(out_dir, "energies.csv")),
        "convergence": write_table(trace.convergence, os.path.join(out_dir, "convergence.csv")),
        "u": write_field_csv(trace.u, os.path.join(out_dir, "u.csv")),
        "v": write_field_csv(trace.v, os.path.join(out_dir, "v.csv")),
        "certificates": write_table(pd.DataFrame([c.to_dict() for c in trace.certificates.values()]),
                                    os.path.join(out_dir, "certificates.csv")),
    }
    doubling = []
    for j, rep in enumerate(trace.doubling, start=1):
        df = rep.ratios.copy()
        df.insert(0, "level", j)
        doubling.append(df)
    if doubling:
        paths["doubling"] = write_table(pd.concat(doubling, ignore_index=True), os.path.join(out_dir, "doubling.csv"))
    if getattr(trace, "level_energy", None) is not None:
        paths["level_energies"] = write_table(trace.level_energy, os.path.join(out_dir, "level_energies.csv"))
    if getattr(trace, "stability", None) is not None:
        paths["energy_stability"] = write_table(trace.stability, os.path.join(out_dir, "energy_stability.csv"))
    return paths


def write_decomposition(result, out_dir: str) -> Dict[str, str]:
    cert = dict(result.certificate.to_dict(), K=result.K, capacity_ratio=result.capacity_ratio,
                stabilization_gap=result.stabilization_gap)
    paths = {
        "v": write_field_csv(result.v, os.path.join(out_dir, "v.csv")),
        "w": write_field_csv(result.w, os.path.join(out_dir, "w.csv")),
        "Gamma": write_field_csv(result.Gamma, os.path.join(out_dir, "gamma.csv")),
        "certificate": write_table(pd.DataFrame([cert]), os.path.join(out_dir, "certificate.csv")),
    }
    if result.capacity_rows is not None:
        paths["capacity"] = write_table(result.capacity_rows, os.path.join(out_dir, "capacity_condition.csv"))
    return paths


def format_table(df: pd.DataFrame) -> str:
    return df.to_string(index=False, float_format=lambda v: f"{v:.6g}")
