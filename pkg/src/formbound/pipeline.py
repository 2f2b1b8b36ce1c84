"""
The exhaustion construction end to end.

For nested domains Omega_1 << Omega_2 << ... every level mollifies sigma and A
with eps_j, solves the local Dirichlet problem on Omega_j, normalizes on a
fixed ball B with 8B inside Omega_1, and records the energy, doubling, BMO and
Harnack diagnostics. Gradient convergence in measure is compared on Omega_1.
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .analysis import DoublingReport, bmo_seminorm, doubling_and_wrh, estimate_form_bound
from .core import (Ball, CutoffFamily, Mesh, ProblemParams, ScalarField, ball_cell_weights, ball_inside,
                   ball_lattice, integrate, make_cutoff, radial_mesh, restrict_field, tensor_mesh)
from .decompose import ResidualCertificate, log_transform, residual_basis, ric_residual, schro_residual
from .errors import InputError
from .gates import coercivity_gate, enforce, lambda_s_gate, lower_bound_gate, p_sharp_gate
from .operators import OperatorSpec, mollify_operator
from .solver import SolveConfig, SolveResult, dirichlet_annulus_profile, radial_exponent, solve_local
from .weights import Weight, mollify_weight

logger = logging.getLogger(__name__)

DEFAULT_DELTAS = (1e-1, 1e-2, 1e-3)


@dataclass
class ExhaustionSchedule:
    meshes: Tuple[Mesh, ...]
    ball: Ball
    eps: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.meshes:
            raise InputError("exhaustion schedule needs at least one level")
        kinds = {m.kind for m in self.meshes}
        if len(kinds) != 1:
            raise InputError("exhaustion levels must share one mesh kind")
        for inner, outer in zip(self.meshes[:-1], self.meshes[1:]):
            if not outer.region.contains(inner.region) or inner.region.gap_to(outer.region) <= 0:
                raise InputError(f"{inner.mesh_id} is not compactly inside {outer.mesh_id}")
        if not ball_inside(self.meshes[0], self.ball.scaled(8.0)):
            raise InputError(f"8B for B={self.ball} does not fit inside the first level")
        if not self.eps:
            self.eps = self._default_eps()
        if len(self.eps) != len(self.meshes) or any(e < 0 for e in self.eps):
            raise InputError("one nonnegative eps per level is required")

    def _default_eps(self) -> Tuple[float, ...]:
        eps = []
        prev = np.inf
        for j, mesh in enumerate(self.meshes, start=1):
            e = 2.0 ** (-j)
            if j < len(self.meshes):
                e = min(e, 0.5 * mesh.region.gap_to(self.meshes[j].region))
            prev = min(prev, e)
            eps.append(float(prev))
        return tuple(eps)

    @property
    def levels(self) -> int:
        return len(self.meshes)

    @classmethod
    def annuli(cls, inner: Sequence[float], outer: Sequence[float], n: int, cells: int, ball: Ball,
               grading="log") -> "ExhaustionSchedule":
        if len(inner) != len(outer):
            raise InputError("annuli need one inner and one outer radius per level")
        meshes = tuple(radial_mesh(a, b, n, cells, grading) for a, b in zip(inner, outer))
        return cls(meshes, ball)

    @classmethod
    def boxes(cls, half_widths: Sequence[float], center: Sequence[float], cells: int, ball: Ball) -> "ExhaustionSchedule":
        c = np.asarray(center, dtype=float)
        meshes = tuple(tensor_mesh(c - h, c + h, cells) for h in half_widths)
        return cls(meshes, ball)

    @classmethod
    def single(cls, mesh: Mesh, ball: Ball) -> "ExhaustionSchedule":
        return cls((mesh,), ball, (0.0,))

    def diagnostic_balls(self) -> List[Ball]:
        """Balls whose 4x enlargement fits in Omega_1, shared by every level."""
        return ball_lattice(self.meshes[0], 4.0, levels=3, centers_per_axis=3)

    def cutoffs(self) -> List[CutoffFamily]:
        rho = self.ball.radius
        return [CutoffFamily(self.ball.center, rho, 2.0 * rho, 1),
                CutoffFamily(self.ball.center, 2.0 * rho, 4.0 * rho, 1)]

    def chain_end(self) -> Ball:
        rho = self.ball.radius
        first = self.meshes[0]
        if first.kind == "radial":
            far = Ball(first.inner + 2.0 * rho, rho) if first.inner > 0 else Ball(first.outer - 2.0 * rho, rho)
        else:
            far = Ball(tuple((first.lower + 2.0 * rho).tolist()), rho)
        return far if ball_inside(first, far.scaled(2.0)) else self.ball


@dataclass
class EnergyReport:
    rows: pd.DataFrame

    @property
    def ratios(self) -> pd.DataFrame:
        return self.rows[["R1", "R2", "R3"]]

    def ok(self) -> bool:
        vals = self.rows.drop(columns=[c for c in ("level", "cutoff") if c in self.rows.columns])
        arr = vals.to_numpy(dtype=float)
        return bool(np.all(np.isfinite(arr)) and np.all(arr >= 0))


@dataclass
class PipelineConfig:
    solve: SolveConfig = field(default_factory=SolveConfig)
    restarts: int = 4
    seed: int = 0
    deltas: Tuple[float, ...] = DEFAULT_DELTAS
    mollify: bool = True
    threads: Optional[int] = None
    tolerance: float = 1e-3
    wrh_q: float = 2.0
    energy_limit: float = 0.10


@dataclass
class PipelineTrace:
    levels: List[SolveResult]
    energies: EnergyReport
    doubling: List[DoublingReport]
    bmo: List[float]
    harnack: List[Dict[str, float]]
    convergence: pd.DataFrame
    u: ScalarField
    v: ScalarField
    certificates: Dict[str, ResidualCertificate]
    decisions: List[Dict] = field(default_factory=list)
    eps: Tuple[float, ...] = ()
    lambda_hat: float = 0.0
    params: Optional[ProblemParams] = None
    level_energy: Optional[pd.DataFrame] = None
    stability: Optional[pd.DataFrame] = None

    def summary(self) -> pd.DataFrame:
        rows = []
        for j, res in enumerate(self.levels):
            rows.append({
                "level": j + 1,
                "eps": self.eps[j] if j < len(self.eps) else 0.0,
                "lambda_gate": self.lambda_hat,
                "residual": res.residual,
                "iterations": res.iterations,
                "doubling": self.doubling[j].worst,
                "bmo_log_u": self.bmo[j],
                "harnack": self.harnack[j]["max"],
            })
        return pd.DataFrame(rows)


def lambda_s(s: float, params: ProblemParams) -> float:
    """(s - p + 1)(p/s)^p for s > p."""
    p = params.p
    if not s > p:
        raise InputError(f"lambda(s) needs s > p, got s={s}, p={p}")
    return float((s - p + 1.0) * (p / s) ** p)


def _ratio(num: float, den: float) -> float:
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return num / den


def caccioppoli_checks(u: ScalarField, sigma: Optional[Weight], op: OperatorSpec,
                       cutoffs: Sequence[CutoffFamily], params: ProblemParams) -> EnergyReport:
    """The six cutoff integrals and R1 = I1/I2, R2 = I3/I4, R3 = I5/I6 per cutoff."""
    mesh = u.mesh
    p = params.p
    gu = u.grad.magnitude()
    ub = u.cell_values
    upm = u.with_values(np.abs(u.values) ** (p - 1.0))
    gupm = upm.grad.magnitude()
    rows = []
    for k, fam in enumerate(cutoffs):
        h = make_cutoff(fam, mesh)
        hc = h.cell_values
        gh = h.grad.magnitude()
        support = (hc > 0) | (gh > 0)
        if np.any(ub[support] <= 0):
            raise InputError(f"u is not positive on the support of cutoff {k}")
        with np.errstate(divide="ignore", invalid="ignore"):
            logq = np.where(support, gu / np.where(ub > 0, ub, 1.0), 0.0)
        I = [
            integrate(gu ** p * hc ** p, mesh),
            integrate(np.abs(ub) ** p * gh ** p, mesh),
            integrate(logq ** p * hc ** p, mesh),
            integrate(gh ** p, mesh),
            integrate(gupm ** p * hc ** p, mesh),
            integrate(np.abs(ub) ** (p * (p - 1.0)) * gh ** p, mesh),
        ]
        rows.append({"cutoff": k, "r": fam.r, "R": fam.R,
                     "I1": I[0], "I2": I[1], "I3": I[2], "I4": I[3], "I5": I[4], "I6": I[5],
                     "R1": _ratio(I[0], I[1]), "R2": _ratio(I[2], I[3]), "R3": _ratio(I[4], I[5])})
    return EnergyReport(pd.DataFrame(rows))


def convergence_in_measure(fields: Sequence[ScalarField], deltas: Sequence[float] = DEFAULT_DELTAS) -> pd.DataFrame:
    """Volume fraction of cells with |grad u_j - grad u_k| > delta, per (j, k, delta)."""
    if len(fields) < 2:
        raise InputError("convergence in measure needs at least two fields")
    mesh = fields[0].mesh
    for f in fields[1:]:
        if f.mesh is not mesh and f.mesh.mesh_id != mesh.mesh_id:
            raise InputError("fields live on different submeshes")
    total = mesh.volumes.sum()
    grads = [f.grad.values for f in fields]
    rows = []
    for j in range(len(fields)):
        for k in range(j + 1, len(fields)):
            diff = np.linalg.norm(grads[j] - grads[k], axis=1)
            for d in deltas:
                frac = float(mesh.volumes[diff > d].sum() / total)
                rows.append({"j": j + 1, "k": k + 1, "delta": float(d), "fraction": frac})
    return pd.DataFrame(rows, columns=["j", "k", "delta", "fraction"])


def harnack_chain(values, mesh: Mesh, start: Ball, end: Ball, steps: int = 4) -> Dict[str, float]:
    """Consecutive ball-average ratios along a chain of balls from start to end."""
    if steps < 1:
        raise InputError("a Harnack chain needs at least one step")
    vals = values.cell_values if isinstance(values, ScalarField) else np.asarray(values, dtype=float)
    c0, c1 = start.center_array(), end.center_array()
    balls = []
    for t in np.linspace(0.0, 1.0, steps + 1):
        c = (1.0 - t) * c0 + t * c1
        rad = (1.0 - t) * start.radius + t * end.radius
        balls.append(Ball(float(c[0]) if mesh.kind == "radial" else tuple(c.tolist()), float(rad)))
    means = []
    for b in balls:
        wts = ball_cell_weights(mesh, b)
        if wts.sum() <= 0:
            raise InputError(f"chain ball {b} contains no cells")
        means.append(float(np.dot(wts, vals) / wts.sum()))
    means = np.asarray(means)
    ratios = means[1:] / means[:-1]
    wts = ball_cell_weights(mesh, start.scaled(2.0))
    doubled = float(np.dot(wts, vals) / wts.sum()) / means[0] if ball_inside(mesh, start.scaled(2.0)) else float("nan")
    spread = np.concatenate([ratios, 1.0 / ratios])
    return {"product": float(np.prod(ratios)), "max": float(spread.max()), "doubled": doubled, "steps": steps}


def level_energies(trace: PipelineTrace, ball: Ball) -> pd.DataFrame:
    """int_B |grad u|^p + u^p and int_B |grad u^{p-1}|^p + u^{p(p-1)} per level."""
    p = trace.params.p if trace.params is not None else 2.0
    rows = []
    for j, res in enumerate(trace.levels):
        u = res.u
        mesh = u.mesh
        wts = ball_cell_weights(mesh, ball) / mesh.volumes
        upm = u.with_values(np.abs(u.values) ** (p - 1.0))
        first = integrate(wts * (u.grad.magnitude() ** p + np.abs(u.cell_values) ** p), mesh)
        second = integrate(wts * (upm.grad.magnitude() ** p + np.abs(u.cell_values) ** (p * (p - 1.0))), mesh)
        rows.append({"level": j + 1, "energy": first, "energy_pm1": second})
    return pd.DataFrame(rows)



def energy_stability(energies: pd.DataFrame, limit: float = 0.10) -> pd.DataFrame:
    """Spread max/min - 1 of the ball energies over levels k >= j, for every j with a later level."""
    rows = []
    for j in energies["level"].iloc[:-1]:
        tail = energies[energies["level"] >= j]
        spreads = {}
        for col in ("energy", "energy_pm1"):
            vals = tail[col].to_numpy(dtype=float)
            lo = vals.min()
            spreads[col] = float(vals.max() / lo - 1.0) if lo > 0 else float("inf")
        rows.append({"level": int(j), "spread": spreads["energy"], "spread_pm1": spreads["energy_pm1"],
                     "limit": limit, "passed": bool(max(spreads.values()) < limit)})
    return pd.DataFrame(rows, columns=["level", "spread", "spread_pm1", "limit", "passed"])



def _fit_deviation(values: np.ndarray, shape: np.ndarray) -> float:
    scale = float(np.dot(values, shape) / np.dot(shape, shape))
    fitted = scale * shape
    return float(np.max(np.abs(values - fitted) / np.abs(fitted)))


def level_shape_errors(trace: PipelineTrace, t: float) -> pd.DataFrame:
    """Per level, the best-scaled relative deviation from |x|^gamma on Omega_1 and from the
    trace-1 annulus profile on the level's own mesh (radial p = 2 Hardy runs)."""
    params = trace.params
    if params is None or params.p != 2.0 or trace.levels[0].u.mesh.kind != "radial":
        raise InputError("level shapes are defined for radial p = 2 Hardy runs")
    gamma = radial_exponent(params, t)
    common = trace.levels[0].u.mesh
    rows = []
    for j, res in enumerate(trace.levels):
        mesh = res.u.mesh
        on_common = restrict_field(res.u, common).values
        profile = dirichlet_annulus_profile(params, t, mesh.inner, mesh.outer)
        rows.append({"level": j + 1, "inner": mesh.inner, "outer": mesh.outer,
                     "pure_power": _fit_deviation(on_common, common.radii ** gamma),
                     "closed_form": _fit_deviation(res.u.values, profile(mesh.radii))})
    return pd.DataFrame(rows)

def interpolation_identity(u: ScalarField, mesh: Mesh, params: ProblemParams) -> Dict[str, float]:
    """Both sides of int |grad u|^p u^{p(p-2)} <= int |grad u|^p + int (|grad u|/u)^p for 1 < p < 2."""
    p = params.p
    if p >= 2:
        raise InputError("the splitting inequality is stated for 1 < p < 2")
    ub = u.cell_values
    if np.any(ub <= 0):
        raise InputError("interpolation inequality needs u > 0")
    g = u.grad.magnitude()
    lhs = integrate(g ** p * ub ** (p * (p - 2.0)), mesh)
    rhs = integrate(g ** p, mesh) + integrate((g / ub) ** p, mesh)
    return {"lhs": lhs, "rhs": rhs, "holds": bool(lhs <= rhs * (1.0 + 1e-12))}


def higher_integrability(u: ScalarField, q: float, params: ProblemParams, lambda_hat: float,
                         ball: Ball) -> Dict[str, object]:
    """Ladder s_l = ((n-p)/n)^l q, nested radii (1 + l/N) r and the averages of u^{s_l}."""
    n, p = params.n, params.p
    if p >= n:
        raise InputError(f"higher integrability needs p < n (p={p}, n={n})")
    if not q > p:
        raise InputError(f"target exponent q must exceed p, got q={q}")
    mesh = u.mesh
    if not ball_inside(mesh, ball.scaled(2.0)):
        raise InputError(f"B(x, 2r) for {ball} does not fit inside the mesh")
    ub = u.cell_values
    if np.any(ub <= 0):
        raise InputError("higher integrability needs u > 0")
    ladder = [q]
    while ladder[-1] > p:
        ladder.append(ladder[-1] * (n - p) / n)
    N = sum(1 for s in ladder[1:] if s > p)
    s1 = ladder[1] if N >= 1 else q
    enforce(*lambda_s_gate(lambda_hat, s1, lambda_s(s1, params)))
    rows = []
    for ell, s in enumerate(ladder[:N + 1]):
        radius = ball.radius * (1.0 + ell / max(N, 1))
        b = Ball(ball.center, radius)
        wts = ball_cell_weights(mesh, b)
        mean = float(np.dot(wts, ub ** s) / wts.sum())
        rows.append({"ell": ell, "s": s, "radius": radius, "mean": mean, "norm": mean ** (1.0 / s),
                     "cutoff_gradient": max(N, 1) / ball.radius})
    df = pd.DataFrame(rows)
    norms = df["norm"].to_numpy()
    trail = norms[:-1] / norms[1:] if len(norms) > 1 else np.ones(0)
    integral = float(np.dot(ball_cell_weights(mesh, ball), ub ** q))
    logger.info("higher integrability: N=%d, ladder %s, int_B u^q = %.6g", N, [f"{s:.4g}" for s in ladder], integral)
    return {"ladder": ladder, "N": N, "table": df, "constants": trail.tolist(), "integral": integral}


def _bmo_safe(field_log: ScalarField, mesh: Mesh, p: float, balls: List[Ball]) -> float:
    try:
        return bmo_seminorm(field_log, mesh, p, balls)
    except InputError:
        return float("nan")


def run_pipeline(op: OperatorSpec, sigma: Weight, schedule: ExhaustionSchedule,
                 cfg: Optional[PipelineConfig] = None) -> PipelineTrace:
    """Gate on the outermost level, then solve, normalize and diagnose level by level."""
    cfg = cfg or PipelineConfig()
    params = op.params
    p = params.p
    outer = schedule.meshes[-1]
    gate_sigma = sigma
    gate_op = op
    if cfg.mollify and schedule.eps[-1] > 0:
        gate_sigma = mollify_weight(sigma, schedule.eps[-1], outer)
        gate_op = mollify_operator(op, schedule.eps[-1], outer)
    report = estimate_form_bound(gate_sigma, gate_op, outer, "both", restarts=cfg.restarts, seed=cfg.seed,
                                 threads=cfg.threads)
    decisions = [enforce(*p_sharp_gate(report.lambda_hat, params)),
                 enforce(*lower_bound_gate(report.Lambda_hat))]
    logger.info("pipeline gate: lambda=%.6g < p#=%.6g, Lambda=%.6g", report.lambda_hat, params.p_sharp,
                report.Lambda_hat)

    balls = [b for b in schedule.diagnostic_balls()]
    cutoffs = [c for c in schedule.cutoffs() if ball_inside(schedule.meshes[0], Ball(c.center, c.R))]
    solve_cfg = replace(cfg.solve, normalization_ball=schedule.ball,
                        harnack_balls=(schedule.ball, schedule.ball.scaled(2.0)), seed=cfg.seed)
    levels: List[SolveResult] = []
    energy_rows = []
    doubling: List[DoublingReport] = []
    bmo: List[float] = []
    chains: List[Dict[str, float]] = []
    sig_j, op_j = sigma, op
    for j, mesh in enumerate(schedule.meshes):
        eps = schedule.eps[j] if cfg.mollify else 0.0
        sig_j = mollify_weight(sigma, eps, mesh) if eps > 0 else sigma
        op_j = mollify_operator(op, eps, mesh) if eps > 0 else op
        cert = estimate_form_bound(sig_j, op_j, mesh, "upper", restarts=cfg.restarts, seed=cfg.seed,
                                   threads=cfg.threads)
        decisions.append(enforce(*coercivity_gate(cert.lambda_hat)))
        res = solve_local(op_j, sig_j, mesh, solve_cfg, certificate=cert)
        levels.append(res)
        u = res.u
        rep = caccioppoli_checks(u, sig_j, op_j, cutoffs, params)
        rep.rows.insert(0, "level", j + 1)
        energy_rows.append(rep.rows)
        w = u.with_values(np.abs(u.values) ** (params.q * p))
        doubling.append(doubling_and_wrh(w, mesh, cfg.wrh_q, balls if balls else None))
        bmo.append(_bmo_safe(log_transform(u), mesh, p, balls) if balls else float("nan"))
        chains.append(harnack_chain(u.with_values(u.values ** p), mesh, schedule.ball, schedule.chain_end()))
        logger.info("level %d: eps=%.3g residual=%.3e doubling=%.4g BMO(log u)=%.4g (Caccioppoli, doubling, "
                    "Poincare-BMO checks)", j + 1, eps, res.residual, doubling[-1].worst, bmo[-1])

    common = schedule.meshes[0]
    restricted = [restrict_field(r.u, common) for r in levels]
    convergence = (convergence_in_measure(restricted, cfg.deltas) if len(restricted) > 1
                   else pd.DataFrame(columns=["j", "k", "delta", "fraction"]))

    u = levels[-1].u
    v = log_transform(u)
    basis = residual_basis(u.mesh, p)
    certificates = {
        "schro": schro_residual(u, sig_j, op_j, basis, cfg.tolerance),
        "riccati": ric_residual(v, sig_j, op_j, basis, 2.0 * cfg.tolerance),
    }
    trace = PipelineTrace(levels, EnergyReport(pd.concat(energy_rows, ignore_index=True)), doubling, bmo, chains,
                          convergence, u, v, certificates, decisions, tuple(schedule.eps), float(report.lambda_hat), params)
    trace.level_energy = level_energies(trace, schedule.ball)
    trace.stability = energy_stability(trace.level_energy, cfg.energy_limit)
    return trace
