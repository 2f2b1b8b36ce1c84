"""
Run configuration: INI files read with configparser, command presets, and the
validation pass that runs before any compute or filesystem write.

Sections: [run] [problem] [mesh] [operator] [weight] [solve] [formbound]
[capacity] [pipeline] [decompose] [diagnose] [hardy]. CLI flags override file keys.
"""
from __future__ import annotations
import configparser
import logging
import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .core import Ball, Mesh, MeshSpec, ProblemParams, build_mesh
from .errors import InputError
from .operators import OperatorSpec
from .solver import SolveConfig
from .weights import Weight, hardy_weight, smooth_bump_weight

if TYPE_CHECKING:
    from .pipeline import ExhaustionSchedule

logger = logging.getLogger(__name__)

SECTIONS = ("run", "problem", "mesh", "operator", "weight", "solve", "formbound", "capacity",
            "pipeline", "decompose", "diagnose", "hardy")
COMMANDS = ("solve", "formbound", "capacity", "pipeline", "decompose", "diagnose", "hardy-verify")
STOCHASTIC = {"formbound", "pipeline", "decompose", "solve", "hardy-verify"}

PRESETS: Dict[str, Dict[str, Dict[str, str]]] = {
    "hardy-verify": {
        "run": {"seed": "0"},
        "problem": {"n": "3", "p": "2"},
        "hardy": {"inner_radii": "1e-2, 1e-3, 1e-4", "cells": "2048", "t": "0.75", "solve_inner": "0.05",
                  "endpoint_p": "3", "endpoint_n": "5", "endpoint_inner": "1e-8"},
    },
    "condenser": {
        "run": {"seed": "0"},
        "problem": {"n": "3", "p": "2"},
        "mesh": {"kind": "radial", "lower": "0", "upper": "2", "cells": "4096"},
        "capacity": {"rho": "1", "center": "0"},
    },
    "endpoint": {
        "run": {"seed": "0"},
        "problem": {"n": "5", "p": "3"},
        "weight": {"kind": "hardy", "t": "1"},
        "pipeline": {"inner": "1e-3, 1e-4", "cells": "256", "mollify": "false", "restarts": "4"},
    },
}


@dataclass
class RunConfig:
    command: str
    sections: Dict[str, Dict[str, str]]
    out: str = "artifacts"
    seed: Optional[int] = None
    threads: Optional[int] = None
    source: Optional[str] = None
    params: Optional[ProblemParams] = None
    mesh_spec: Optional[MeshSpec] = None
    files: List[str] = field(default_factory=list)
    mesh: Optional[Mesh] = None
    schedule: Optional["ExhaustionSchedule"] = None

    def section(self, name: str) -> Dict[str, str]:
        return self.sections.get(name, {})

    def get(self, section: str, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.section(section).get(key, default)

    def get_float(self, section: str, key: str, default: Optional[float] = None) -> Optional[float]:
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise InputError(f"[{section}] {key} must be a number, got {raw!r}")

    def get_int(self, section: str, key: str, default: Optional[int] = None) -> Optional[int]:
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise InputError(f"[{section}] {key} must be an integer, got {raw!r}")

    def get_floats(self, section: str, key: str, default: Optional[Tuple[float, ...]] = None):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
        except ValueError:
            raise InputError(f"[{section}] {key} must be a comma-separated list of numbers, got {raw!r}")

    def path(self, section: str, key: str) -> Optional[str]:
        """A file path from the config, resolved against the config file's directory."""
        raw = self.get(section, key)
        if raw is None:
            return None
        if os.path.isabs(raw) or self.source is None:
            return raw
        return os.path.join(os.path.dirname(os.path.abspath(self.source)), raw)


def _as_dict(parser: configparser.ConfigParser) -> Dict[str, Dict[str, str]]:
    return {s: dict(parser.items(s)) for s in parser.sections()}


def read_config(path: str) -> Dict[str, Dict[str, str]]:
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}", path=path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as e:
        raise InputError(f"cannot parse {path}: {e}", path=path)
    return _as_dict(parser)


def read_keyvalue_file(path: str, section: str) -> Dict[str, str]:
    """A bare key=value file, read as if it were one INI section."""
    if not os.path.exists(path):
        raise InputError(f"{section} file not found: {path}", path=path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path, "r") as f:
        text = f.read()
    try:
        parser.read_string(f"[{section}]\n{text}")
    except configparser.Error as e:
        raise InputError(f"cannot parse {path}: {e}", path=path)
    return dict(parser.items(section))


def load_run_config(command: str, path: Optional[str] = None, *, preset: Optional[str] = None,
                    overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    assert command in COMMANDS, command
    sections: Dict[str, Dict[str, str]] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise InputError(f"unknown preset {preset!r}")
        sections = {k: dict(v) for k, v in PRESETS[preset].items()}
    if path is not None:
        for name, values in read_config(path).items():
            sections.setdefault(name, {}).update(values)
    overrides = overrides or {}
    run = sections.get("run", {})
    out = overrides.get("out") or run.get("out") or "artifacts"
    seed = overrides.get("seed")
    if seed is None and run.get("seed") is not None:
        try:
            seed = int(run["seed"])
        except ValueError:
            raise InputError(f"[run] seed must be an integer, got {run['seed']!r}")
    threads = overrides.get("threads")
    if threads is None and run.get("threads") is not None:
        try:
            threads = int(run["threads"])
        except ValueError:
            raise InputError(f"[run] threads must be an integer, got {run['threads']!r}")
    return RunConfig(command, sections, str(out), seed, threads, path)


def _mesh_spec(cfg: RunConfig) -> Optional[MeshSpec]:
    values = dict(cfg.section("mesh"))
    mesh_file = cfg.path("mesh", "file")
    if mesh_file is not None:
        loaded = read_keyvalue_file(mesh_file, "mesh")
        cfg.files.append(mesh_file)
        values = {**loaded, **{k: v for k, v in values.items() if k != "file"}}
    if not values:
        return None
    kind = values.get("kind", "radial")
    n = cfg.params.n if cfg.params is not None else int(values.get("n", 3))
    try:
        if kind == "radial":
            grading = values.get("grading")
            if grading is not None and grading != "log":
                grading = float(grading)
            return MeshSpec("radial", n, int(values.get("cells", 512)), float(values.get("lower", 0.0)),
                            float(values.get("upper", 1.0)), grading)
        lower = tuple(float(v) for v in values.get("lower", ",".join(["-1"] * n)).split(","))
        upper = tuple(float(v) for v in values.get("upper", ",".join(["1"] * n)).split(","))
        cells_raw = values.get("cells", "32")
        cells = int(cells_raw) if "," not in cells_raw else tuple(int(v) for v in cells_raw.split(","))
        return MeshSpec("tensor", n, cells, lower, upper)
    except ValueError as e:
        raise InputError(f"bad mesh description: {e}")


def validate(cfg: RunConfig) -> RunConfig:
    """Fail-fast checks: parameters, referenced files, seeds. Touches nothing on disk."""
    problem = cfg.section("problem")
    if cfg.command != "hardy-verify" or problem:
        if "n" not in problem or "p" not in problem:
            raise InputError("[problem] needs n and p")
        try:
            cfg.params = ProblemParams(int(problem["n"]), float(problem["p"]))
        except ValueError as e:
            raise InputError(f"bad [problem] values: {e}")
    if cfg.command in STOCHASTIC and cfg.seed is None:
        raise InputError(f"command {cfg.command} needs a seed ([run] seed or --seed)")
    if cfg.threads is not None and cfg.threads < 1:
        raise InputError(f"--threads must be >= 1, got {cfg.threads}")
    cfg.mesh_spec = _mesh_spec(cfg)
    if cfg.command not in {"hardy-verify", "pipeline"} and cfg.mesh_spec is None:
        raise InputError(f"command {cfg.command} needs a [mesh] section")
    for section, key in (("operator", "table"), ("weight", "density"), ("weight", "gamma"), ("diagnose", "field")):
        fp = cfg.path(section, key)
        if fp is not None:
            if not os.path.exists(fp):
                raise InputError(f"{section} {key} file not found: {fp}", path=fp)
            cfg.files.append(fp)
    op_kind = cfg.get("operator", "kind", "p-laplacian")
    if op_kind not in {"p-laplacian", "oscillating", "tabulated"}:
        raise InputError(f"unknown operator kind {op_kind!r}")
    w_kind = cfg.get("weight", "kind", "zero")
    if w_kind not in {"zero", "hardy", "bump", "table"}:
        raise InputError(f"unknown weight kind {w_kind!r}")
    if w_kind == "hardy" and cfg.params is not None and cfg.params.p >= cfg.params.n:
        raise InputError(f"Hardy weight needs p < n (p={cfg.params.p}, n={cfg.params.n})")
    if cfg.command == "decompose" and cfg.get_float("decompose", "c0") is None:
        raise InputError("[decompose] needs c0")
    _dry_build(cfg)
    logger.debug("validated %s config from %s", cfg.command, cfg.source or "presets")
    return cfg


def _dry_build(cfg: RunConfig):
    # everything a handler builds before its first write must build here
    if cfg.command == "hardy-verify":
        return
    if cfg.command == "pipeline":
        mesh = build_schedule(cfg).meshes[-1]
    else:
        mesh = build_mesh_from(cfg)
    if cfg.command == "capacity":
        ball_from(cfg, "capacity", mesh)
    else:
        build_operator(cfg, mesh)
        build_weight(cfg, mesh)
    build_solve_config(cfg)


def build_mesh_from(cfg: RunConfig) -> Mesh:
    if cfg.mesh is None:
        if cfg.mesh_spec is None:
            raise InputError("no mesh description")
        cfg.mesh = build_mesh(cfg.mesh_spec)
    return cfg.mesh


def build_schedule(cfg: RunConfig) -> "ExhaustionSchedule":
    """The [pipeline] exhaustion: dyadic annuli by default, boxes on request."""
    from .pipeline import ExhaustionSchedule

    if cfg.schedule is not None:
        return cfg.schedule
    params = cfg.params
    levels = cfg.get_int("pipeline", "levels", 5)
    a0 = cfg.get_float("pipeline", "a0", 0.1)
    cells = cfg.get_int("pipeline", "cells", 512)
    kind = cfg.get("pipeline", "kind", "annuli")
    center = cfg.get_floats("pipeline", "center", (0.5,))
    radius = cfg.get_float("pipeline", "radius", 0.05)
    if kind == "annuli":
        inner = cfg.get_floats("pipeline", "inner") or tuple(a0 * 2.0 ** (-j) for j in range(1, levels + 1))
        outer = cfg.get_floats("pipeline", "outer") or tuple(1.0 - a for a in inner)
        cfg.schedule = ExhaustionSchedule.annuli(inner, outer, params.n, cells, Ball(center[0], radius),
                                                 cfg.get("pipeline", "grading", "log"))
    elif kind == "boxes":
        widths = cfg.get_floats("pipeline", "half_widths") or tuple(1.0 - a0 * 2.0 ** (-j)
                                                                     for j in range(1, levels + 1))
        c = center if len(center) == params.n else (0.0,) * params.n
        cfg.schedule = ExhaustionSchedule.boxes(widths, c, cells, Ball(tuple(c), radius))
    else:
        raise InputError(f"unknown [pipeline] kind {kind!r}")
    return cfg.schedule


def _read_column(path: str, columns: List[str], rows: int) -> np.ndarray:
    df = pd.read_csv(path)
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise InputError(f"{path} lacks columns {missing}", path=path)
    vals = df[columns].to_numpy(dtype=float)
    if vals.shape[0] != rows:
        raise InputError(f"{path} has {vals.shape[0]} rows, mesh has {rows} cells", path=path)
    return vals[:, 0] if len(columns) == 1 else vals


def build_operator(cfg: RunConfig, mesh: Mesh) -> OperatorSpec:
    kind = cfg.get("operator", "kind", "p-laplacian")
    params = cfg.params
    if kind == "p-laplacian":
        return OperatorSpec.p_laplacian(params)
    if kind == "tabulated":
        table = _read_column(cfg.path("operator", "table"), ["weight"], mesh.ncells)
        return OperatorSpec.tabulated(params, mesh, table)
    m = cfg.get_float("operator", "min_weight", 1.0)
    M = cfg.get_float("operator", "max_weight", 2.0)
    freq = cfg.get_float("operator", "frequency", 4.0)

    def weight_fn(x: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(x, axis=1)
        return 0.5 * (m + M) + 0.5 * (M - m) * np.cos(2.0 * np.pi * freq * r)

    return OperatorSpec.scalar_weighted(params, weight_fn, m, M)


def build_weight(cfg: RunConfig, mesh: Mesh) -> Weight:
    kind = cfg.get("weight", "kind", "zero")
    if kind == "zero":
        return Weight.zeros()
    if kind == "hardy":
        return hardy_weight(cfg.params, cfg.get_float("weight", "t", 0.5), cfg.get("weight", "form", "density"))
    if kind == "bump":
        center = cfg.get_floats("weight", "center", (0.5,))
        c = center[0] if mesh.kind == "radial" else center
        return smooth_bump_weight(c, cfg.get_float("weight", "radius", 0.25), cfg.get_float("weight", "amplitude", 1.0),
                                  cfg.get_int("weight", "degree", 3))
    density = gamma = None
    dpath = cfg.path("weight", "density")
    gpath = cfg.path("weight", "gamma")
    if dpath is not None:
        density = _read_column(dpath, ["density"], mesh.ncells)
    if gpath is not None:
        gamma = _read_column(gpath, [f"gamma{k}" for k in range(mesh.ncomp)], mesh.ncells)
    if density is None and gamma is None:
        raise InputError("table weight needs [weight] density or gamma")
    return Weight.from_tables(mesh, density, gamma)


def build_solve_config(cfg: RunConfig) -> SolveConfig:
    s = cfg.section("solve")
    kwargs = {}
    for key, cast in (("max_iterations", int), ("tolerance", float), ("continuation_steps", int),
                      ("damping_min", float), ("delta_initial", float), ("delta_final", float),
                      ("slack_factor", float), ("coercivity_restarts", int)):
        if key in s:
            try:
                kwargs[key] = cast(s[key])
            except ValueError:
                raise InputError(f"[solve] {key} must be {cast.__name__}, got {s[key]!r}")
    if cfg.params is not None and cfg.params.p != 2.0 and "continuation_steps" not in kwargs:
        kwargs["continuation_steps"] = 4
    return SolveConfig(seed=cfg.seed or 0, **kwargs)


def ball_from(cfg: RunConfig, section: str, mesh: Mesh, radius_key: str = "rho") -> Ball:
    center = cfg.get_floats(section, "center", (0.0,) * (1 if mesh.kind == "radial" else mesh.cdim))
    radius = cfg.get_float(section, radius_key)
    if radius is None or radius <= 0:
        raise InputError(f"[{section}] {radius_key} must be a positive radius")
    c = center[0] if mesh.kind == "radial" else tuple(center)
    return Ball(c, radius)
