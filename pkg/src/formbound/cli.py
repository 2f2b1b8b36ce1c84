from __future__ import annotations
import argparse
import json
import logging
import os
import sys
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from .analysis import (bmo_seminorm, capacity, condenser_capacity, doubling_and_wrh, estimate_form_bound,
                       hardy_annulus_value)
from .config import (COMMANDS, PRESETS, RunConfig, ball_from, build_mesh_from, build_operator,
                     build_schedule, build_solve_config, build_weight, load_run_config, validate)
from .core import CutoffFamily, ProblemParams, read_field_csv, radial_mesh
from .decompose import DecomposeConfig, decompose_sigma, log_transform, schro_residual, supercritical_degeneracy_check
from .errors import FormboundError, GateRefusal, InputError, NonConvergence
from .gates import check_gate, p_sharp_gate
from .measure import track_execution
from .operators import OperatorSpec, minkowski_check, validate_structure
from .pipeline import PipelineConfig, caccioppoli_checks, higher_integrability, level_shape_errors, run_pipeline
from .plots import plot_capacity_decay, plot_hardy_sweep, plot_solution
from .reports import (append_decision, append_summary_row, error_record, format_table, write_decomposition,
                      write_solve_result, write_table, write_trace)
from .solver import SolveConfig, radial_exponent, solve_local
from .weights import hardy_weight

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(value: str) -> int:
    iv = int(value)
    if iv < 1:
        raise argparse.ArgumentTypeError("must be >=1")
    return iv


def _summary_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.out, "summary.csv")


def _record(cfg: RunConfig, rows: List[Dict]):
    for row in rows:
        append_summary_row(_summary_path(cfg), dict(row, command=cfg.command))


def _exact_boundary(cfg: RunConfig):
    t = cfg.get_float("weight", "t", 0.5)
    gamma = radial_exponent(cfg.params, t)
    return gamma, (lambda x: np.linalg.norm(x, axis=1) ** gamma)


def cmd_solve(cfg: RunConfig) -> int:
    mesh = build_mesh_from(cfg)
    op = build_operator(cfg, mesh)
    sigma = build_weight(cfg, mesh)
    scfg = build_solve_config(cfg)
    boundary = cfg.get("solve", "boundary", "one")
    data = None
    gamma = None
    if boundary == "exact":
        if cfg.get("weight", "kind") != "hardy" or mesh.kind != "radial":
            raise InputError("exact boundary data needs a Hardy weight on a radial mesh")
        gamma, data = _exact_boundary(cfg)
    elif boundary != "one":
        data = float(boundary)
    measured = track_execution(solve_local, label="solve", op=op, sigma=sigma, mesh=mesh, cfg=scfg, boundary=data)
    res = measured["result"]
    tol = cfg.get_float("solve", "certificate_tolerance", 1e-3)
    cert = schro_residual(res.u, sigma, op, tolerance=tol)
    paths = write_solve_result(res, cfg.out)
    rows = [{"quantity": "schro_residual", "value": cert.max_residual, "tolerance": tol, "passed": cert.passed}]
    if gamma is not None:
        exact = mesh.radii ** gamma
        err = float(np.max(np.abs(res.u.values - exact) / np.abs(exact)))
        rows.append({"quantity": "max_relative_error", "value": err, "reference": gamma,
                     "notes": "closed-form |x|^gamma"})
        plot_solution(res.u, exact, cfg.out)
    _record(cfg, rows)
    print("Wrote u:", paths["u"], "iterations:", res.iterations, "residual:", f"{res.residual:.3e}")
    return 0 if cert.passed else NonConvergence.exit_code


def cmd_formbound(cfg: RunConfig) -> int:
    mesh = build_mesh_from(cfg)
    op = build_operator(cfg, mesh)
    sigma = build_weight(cfg, mesh)
    sign = cfg.get("formbound", "sign", "both")
    restarts = cfg.get_int("formbound", "restarts", 8)
    measured = track_execution(estimate_form_bound, label="form bound", sigma=sigma, op=op, mesh=mesh, sign=sign,
                               restarts=restarts, seed=cfg.seed, threads=cfg.threads)
    rep = measured["result"]
    row = rep.to_dict()
    if cfg.get("weight", "kind") == "hardy" and cfg.params.p == 2.0 and mesh.kind == "radial" and mesh.inner > 0:
        row["closed_form"] = hardy_annulus_value(cfg.params, cfg.get_float("weight", "t", 0.5), mesh.inner, mesh.outer)
    fp = write_table(pd.DataFrame([row]), os.path.join(cfg.out, "formbound.csv"))
    if rep.lambda_hat is not None:
        ok, decision = p_sharp_gate(rep.lambda_hat, cfg.params)
        append_decision(os.path.join(cfg.out, "gate_decisions.json"), decision)
        _record(cfg, [{"quantity": "lambda", "value": rep.lambda_hat, "reference": row.get("closed_form"),
                       "tolerance": cfg.params.p_sharp, "passed": ok}])
    if rep.Lambda_hat is not None:
        _record(cfg, [{"quantity": "Lambda", "value": rep.Lambda_hat, "passed": bool(np.isfinite(rep.Lambda_hat))}])
    print("Wrote form bound:", fp, "lambda:", rep.lambda_hat, "Lambda:", rep.Lambda_hat)
    return 0


def cmd_capacity(cfg: RunConfig) -> int:
    mesh = build_mesh_from(cfg)
    params = cfg.params
    ball = ball_from(cfg, "capacity", mesh)
    rep = capacity(ball, mesh, params, build_solve_config(cfg))
    exact = float("nan")
    if mesh.kind == "radial" and float(ball.center_array()[0]) == 0.0 and mesh.inner == 0.0:
        exact = condenser_capacity(params, ball.radius, mesh.outer)
    rel = abs(rep.cap - exact) / exact if np.isfinite(exact) else float("nan")
    df = pd.DataFrame([{"compact": rep.compact, "capacity": rep.cap, "closed_form": exact, "relative_error": rel,
                        "feasibility_margin": rep.feasibility_margin}])
    write_table(df, os.path.join(cfg.out, "capacity.csv"))
    _record(cfg, [{"quantity": "capacity", "value": rep.cap, "reference": exact, "tolerance": 1e-2,
                   "passed": bool(rel <= 1e-2) if np.isfinite(rel) else None}])
    print(format_table(df))
    radii = cfg.get_floats("capacity", "domain_radii")
    if radii and params.p >= params.n:
        cells = mesh.ncells
        meshes = [radial_mesh(0.0, R, params.n, cells) for R in radii]
        report = supercritical_degeneracy_check(params, meshes, ball.radius, build_solve_config(cfg))
        write_table(report["table"], os.path.join(cfg.out, "capacity_decay.csv"))
        plot_capacity_decay(report["table"], cfg.out)
        print(format_table(report["table"]))
        print("fitted slope:", f"{report['slope']:.4f}", "law:", report["law"])
    return 0


def cmd_pipeline(cfg: RunConfig) -> int:
    params = cfg.params
    schedule = build_schedule(cfg)
    mesh0 = schedule.meshes[-1]
    op = build_operator(cfg, mesh0)
    sigma = build_weight(cfg, mesh0)
    pcfg = PipelineConfig(solve=build_solve_config(cfg), restarts=cfg.get_int("pipeline", "restarts", 4),
                          seed=cfg.seed, deltas=cfg.get_floats("pipeline", "deltas", (1e-1, 1e-2, 1e-3)),
                          mollify=cfg.get("pipeline", "mollify", "true").lower() in {"1", "true", "yes"},
                          threads=cfg.threads, tolerance=cfg.get_float("pipeline", "tolerance", 1e-3))
    try:
        measured = track_execution(run_pipeline, label="pipeline", op=op, sigma=sigma, schedule=schedule, cfg=pcfg)
    except GateRefusal as e:
        decision = e.decision if e.decision is not None else check_gate(e.gate, e.measured, e.limit)[1]
        append_decision(os.path.join(cfg.out, "gate_decisions.json"), decision)
        raise
    trace = measured["result"]
    for decision in trace.decisions:
        append_decision(os.path.join(cfg.out, "gate_decisions.json"), decision)
    write_trace(trace, cfg.out)
    summary = trace.summary()
    print(format_table(summary))
    q = cfg.get_float("pipeline", "q")
    if q is not None and params.p < params.n:
        hi = higher_integrability(trace.u, q, params, trace.lambda_hat, schedule.ball)
        write_table(hi["table"], os.path.join(cfg.out, "higher_integrability.csv"))
        print("higher integrability: N =", hi["N"], "int_B u^q =", f"{hi['integral']:.6g}")
    rows = [{"quantity": f"{name}_residual", "value": c.max_residual, "tolerance": c.tolerance, "passed": c.passed}
            for name, c in trace.certificates.items()]
    if trace.stability is not None and len(trace.stability):
        tail = trace.stability.iloc[-1]
        rows.append({"quantity": "energy_variation", "value": max(tail["spread"], tail["spread_pm1"]),
                     "tolerance": tail["limit"], "passed": bool(tail["passed"]),
                     "notes": f"levels >= {int(tail['level'])}"})
    if cfg.get("weight", "kind") == "hardy" and params.p == 2.0 and schedule.meshes[0].kind == "radial":
        shapes = level_shape_errors(trace, cfg.get_float("weight", "t", 0.5))
        write_table(shapes, os.path.join(cfg.out, "level_shapes.csv"))
        print(format_table(shapes))
    _record(cfg, rows)
    return 0


def cmd_decompose(cfg: RunConfig) -> int:
    mesh = build_mesh_from(cfg)
    op = build_operator(cfg, mesh)
    sigma = build_weight(cfg, mesh)
    dcfg = DecomposeConfig(tolerance=cfg.get_float("decompose", "tolerance", 1e-3),
                           truncations=cfg.get_int("decompose", "truncations", 3),
                           solve=build_solve_config(cfg), restarts=cfg.get_int("decompose", "restarts", 4),
                           seed=cfg.seed, threads=cfg.threads)
    result = decompose_sigma(sigma, cfg.get_float("decompose", "c0"), op, mesh, dcfg)
    write_decomposition(result, cfg.out)
    cert = result.certificate
    _record(cfg, [{"quantity": "divergence_match", "value": cert.max_residual, "tolerance": cert.tolerance,
                   "passed": cert.passed},
                  {"quantity": "capacity_ratio", "value": result.capacity_ratio}])
    print("divergence match:", f"{cert.max_residual:.3e}", "capacity ratio:", f"{result.capacity_ratio:.6g}")
    if not cert.passed:
        raise NonConvergence(f"divergence-match residual {cert.max_residual:.3e} exceeds {cert.tolerance:.1e}",
                             residual=cert.max_residual)
    return 0


def cmd_diagnose(cfg: RunConfig) -> int:
    mesh = build_mesh_from(cfg)
    params = cfg.params
    op = build_operator(cfg, mesh)
    sigma = build_weight(cfg, mesh)
    field_path = cfg.path("diagnose", "field")
    if field_path is not None:
        u = read_field_csv(field_path, mesh)
    else:
        u = solve_local(op, sigma, mesh, build_solve_config(cfg)).u
    structure = validate_structure(op, samples=cfg.get_int("diagnose", "samples", 1000), seed=cfg.seed or 0)
    rows = [{"quantity": "structure", "passed": structure.ok}]
    if not op.spatially_constant or op.p != 2.0:
        rows.append({"quantity": "minkowski_ratio", "value": minkowski_check(op, mesh, seed=cfg.seed or 0)})
    w = u.with_values(np.abs(u.values) ** (params.q * params.p))
    dbl = doubling_and_wrh(w, mesh, cfg.get_float("diagnose", "wrh_q", 2.0))
    write_table(dbl.ratios, os.path.join(cfg.out, "doubling.csv"))
    write_table(dbl.wrh, os.path.join(cfg.out, "wrh.csv"))
    rows.append({"quantity": "doubling", "value": dbl.worst})
    rows.append({"quantity": "bmo_log_u", "value": bmo_seminorm(log_transform(u), mesh, params.p)})
    center = cfg.get_floats("diagnose", "center")
    radii = cfg.get_floats("diagnose", "cutoff_radii")
    if center is not None and radii is not None:
        c = center[0] if mesh.kind == "radial" else tuple(center)
        fams = [CutoffFamily(c, r, R, cfg.get_int("diagnose", "degree", 1)) for r, R in zip(radii[::2], radii[1::2])]
        energy = caccioppoli_checks(u, sigma, op, fams, params)
        write_table(energy.rows, os.path.join(cfg.out, "caccioppoli.csv"))
    q = cfg.get_float("diagnose", "q")
    lam = cfg.get_float("diagnose", "lambda")
    if q is not None and lam is not None:
        hi = higher_integrability(u, q, params, lam, ball_from(cfg, "diagnose", mesh, "radius"))
        write_table(hi["table"], os.path.join(cfg.out, "higher_integrability.csv"))
    _record(cfg, rows)
    print(format_table(pd.DataFrame(rows)))
    return 0


def cmd_hardy_verify(cfg: RunConfig) -> int:
    params = cfg.params or ProblemParams(3, 2.0)
    cells = cfg.get_int("hardy", "cells", 2048)
    rows = []

    sweep = []
    one = hardy_weight(params, 1.0)
    op = OperatorSpec.p_laplacian(params)
    for a in cfg.get_floats("hardy", "inner_radii", (1e-2, 1e-3, 1e-4)):
        mesh = radial_mesh(a, 1.0, params.n, cells, "log")
        rep = estimate_form_bound(one, op, mesh, "upper", restarts=cfg.get_int("hardy", "restarts", 4),
                                  seed=cfg.seed, threads=cfg.threads)
        exact = hardy_annulus_value(params, 1.0, a) if params.p == 2.0 else float("nan")
        sweep.append({"a": a, "lambda_hat": rep.lambda_hat, "exact": exact})
    sweep_df = pd.DataFrame(sweep)
    lam = sweep_df["lambda_hat"].to_numpy()
    close = bool(np.all(np.abs(lam - sweep_df["exact"]) <= 2e-2 * sweep_df["exact"])) if params.p == 2.0 else True
    increasing = bool(np.all(np.diff(lam) > 0))
    rows.append({"quantity": "sharp constant", "value": float(lam[-1]), "reference": float(sweep_df["exact"].iloc[-1]),
                 "tolerance": 2e-2, "passed": close and increasing and bool(np.all(lam <= 1.0 + 1e-6))})
    write_table(sweep_df, os.path.join(cfg.out, "hardy_sweep.csv"))
    plot_hardy_sweep(sweep_df, cfg.out)

    t = cfg.get_float("hardy", "t", 0.75)
    gamma = radial_exponent(params, t)
    mesh = radial_mesh(cfg.get_float("hardy", "solve_inner", 0.05), 1.0, params.n, cells, "log")
    scfg = SolveConfig(seed=cfg.seed or 0, continuation_steps=1 if params.p == 2.0 else 4)
    res = solve_local(op, hardy_weight(params, t), mesh, scfg, boundary=lambda x: np.linalg.norm(x, axis=1) ** gamma)
    exact = mesh.radii ** gamma
    err = float(np.max(np.abs(res.u.values - exact) / exact))
    rows.append({"quantity": "exponent", "value": err, "reference": gamma, "tolerance": 1e-3, "passed": err <= 1e-3})
    plot_solution(res.u, exact, cfg.out)

    ep = ProblemParams(cfg.get_int("hardy", "endpoint_n", 5), cfg.get_float("hardy", "endpoint_p", 3.0))
    emesh = radial_mesh(cfg.get_float("hardy", "endpoint_inner", 1e-8), 1.0, ep.n, cells, "log")
    erep = estimate_form_bound(hardy_weight(ep, 1.0), OperatorSpec.p_laplacian(ep), emesh, "upper",
                               restarts=cfg.get_int("hardy", "restarts", 4), seed=cfg.seed, threads=cfg.threads)
    ok, decision = p_sharp_gate(erep.lambda_hat, ep)
    append_decision(os.path.join(cfg.out, "gate_decisions.json"), decision)
    rows.append({"quantity": "endpoint refusal", "value": erep.lambda_hat, "reference": ep.p_sharp,
                 "passed": not ok, "notes": decision["action"]})

    _record(cfg, rows)
    table = pd.DataFrame(rows)[["quantity", "value", "reference", "passed"]]
    print(format_table(table))
    return 0 if all(r["passed"] for r in rows) else GateRefusal.exit_code


HANDLERS: Dict[str, Callable[[RunConfig], int]] = {
    "solve": cmd_solve,
    "formbound": cmd_formbound,
    "capacity": cmd_capacity,
    "pipeline": cmd_pipeline,
    "decompose": cmd_decompose,
    "diagnose": cmd_diagnose,
    "hardy-verify": cmd_hardy_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="formbound", description="Form bounds, capacities and decompositions for p-Laplace operators")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    helps = {
        "solve": "Solve the local Dirichlet problem and certify the residual",
        "formbound": "Estimate the form-bound constants lambda and Lambda",
        "capacity": "Compute the p-capacity of a ball",
        "pipeline": "Run the exhaustion construction level by level",
        "decompose": "Decompose sigma = div Gamma and check the capacity condition",
        "diagnose": "Doubling, BMO, Caccioppoli and structure diagnostics for a field",
        "hardy-verify": "Run the Hardy exponent, sharp-constant and endpoint experiments",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", type=str, default=None, help="Path to an INI run configuration")
        sp.add_argument("--preset", choices=sorted(PRESETS), default=None, help="Start from a named preset")
        sp.add_argument("--out", type=str, default=None, help="Output directory (overrides [run] out)")
        sp.add_argument("--threads", type=_positive_int, default=None, help="Worker cap for restarts and sums")
        sp.add_argument("--seed", type=int, default=None, help="Random seed (overrides [run] seed)")
        sp.add_argument("--verbose", action="store_true", help="DEBUG logging")
    return p


def _attach_run_log(out_dir: str) -> logging.Handler:
    os.makedirs(out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    preset = args.preset
    if preset is None and args.config is None:
        preset = {"hardy-verify": "hardy-verify", "capacity": "condenser"}.get(args.cmd)
    handler = None
    try:
        cfg = load_run_config(args.cmd, args.config, preset=preset,
                              overrides={"out": args.out, "seed": args.seed, "threads": args.threads})
        if not cfg.sections:
            parser.print_usage(sys.stderr)
            print("formbound: error: empty configuration", file=sys.stderr)
            return 1
        validate(cfg)
        handler = _attach_run_log(cfg.out)
        logger.info("command %s, config %s, preset %s, seed %s", cfg.command, cfg.source, preset, cfg.seed)
        return HANDLERS[cfg.command](cfg)
    except (FormboundError, FileNotFoundError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        print(json.dumps(error_record(e)), file=sys.stderr)
        return error_record(e)["exit_code"]
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
