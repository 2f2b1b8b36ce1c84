"""
Log substitution, weak-residual certificates, and the construction of Gamma
with sigma = div(Gamma) from Riesz and Green potentials.
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import roots_jacobi, roots_legendre

from .analysis import CapacityConditionReport, capacity, capacity_condition, condenser_capacity
from .core import (Ball, Mesh, ProblemParams, ScalarField, VectorField, ball_cell_weights, ball_inside,
                   make_cutoff, shell_cutoff, sphere_area, CutoffFamily)
from .errors import InputError
from .measure import fit_rate
from .operators import OperatorSpec, flux
from .solver import DiscreteSystem, SolveConfig, hat_gradient_norms
from .weights import MeasureField, Weight

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-3
EQUATIONS = {"schro", "riccati", "poisson", "divergence-match"}


@dataclass
class ResidualCertificate:
    equation: str
    basis: str
    max_residual: float
    tolerance: float
    passed: bool

    def to_dict(self) -> Dict[str, object]:
        return {
            "equation": self.equation,
            "basis": self.basis,
            "max_residual": self.max_residual,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


@dataclass
class DecompositionResult:
    v: ScalarField
    mu: MeasureField
    w: ScalarField
    Gamma: VectorField
    capacity_ratio: float
    certificate: ResidualCertificate
    K: float
    stabilization_gap: float
    capacity_rows: Optional[pd.DataFrame] = None
    truncations: List[float] = field(default_factory=list)


@dataclass
class ResidualBasis:
    """Interior nodal hats plus smooth bumps at three scales."""

    mesh: Mesh
    p: float
    hat_norms: np.ndarray
    bumps: np.ndarray
    bump_norms: np.ndarray

    @property
    def description(self) -> str:
        return f"hats({int(self.mesh.interior.sum())})+bumps({self.bumps.shape[1]})"

    def normalized(self, nodal: np.ndarray) -> np.ndarray:
        """|r(phi)| / ||grad phi||_p for a residual given as a nodal vector."""
        free = self.mesh.interior
        hats = np.abs(nodal[free]) / self.hat_norms[free]
        bumps = np.abs(nodal @ self.bumps) / self.bump_norms if self.bumps.size else np.empty(0)
        return np.concatenate([hats, bumps])


def _bump_columns(mesh: Mesh) -> List[np.ndarray]:
    cols = []
    if mesh.kind == "radial":
        a, b = mesh.inner, mesh.outer
        c = 0.5 * (a + b)
        for k in (4.0, 8.0, 16.0):
            w = (b - a) / k
            cols.append(shell_cutoff(mesh, c - w, c - 0.5 * w, c + 0.5 * w, c + w).values)
    else:
        c = tuple((0.5 * (mesh.lower + mesh.upper)).tolist())
        span = float(np.min(mesh.upper - mesh.lower))
        for k in (4.0, 8.0, 16.0):
            R = span / k
            cols.append(make_cutoff(CutoffFamily(c, 0.5 * R, R, 3), mesh).values)
    return cols


def residual_basis(mesh: Mesh, p: float) -> ResidualBasis:
    cols = _bump_columns(mesh)
    bumps = np.stack(cols, axis=1) if cols else np.zeros((mesh.npts, 0))
    G = mesh.grad_q
    qw = mesh.qweights.reshape(-1)
    norms = []
    for j in range(bumps.shape[1]):
        g = np.asarray(G @ bumps[:, j]).reshape(-1, mesh.ncomp)
        norms.append(float(np.sum(qw * np.sum(g * g, axis=1) ** (p / 2.0)) ** (1.0 / p)))
    return ResidualBasis(mesh, p, hat_gradient_norms(mesh, p), bumps, np.asarray(norms))


def _certify(equation: str, nodal: np.ndarray, basis: ResidualBasis, tolerance: float) -> ResidualCertificate:
    assert equation in EQUATIONS
    vals = basis.normalized(nodal)
    worst = float(vals.max()) if vals.size else 0.0
    passed = bool(worst <= tolerance)
    logger.info("%s residual %.3e (tolerance %.1e, %s): %s", equation, worst, tolerance,
                basis.description, "pass" if passed else "FAIL")
    return ResidualCertificate(equation, basis.description, worst, float(tolerance), passed)


def log_transform(u: ScalarField) -> ScalarField:
    """v = log u for a strictly positive field."""
    if np.any(u.values <= 0) or np.any(u.cell_values <= 0):
        raise InputError(f"log transform needs u > 0, min is {u.values.min():.3e}")
    return ScalarField(u.mesh, np.log(u.values))


def chain_rule_error(u: ScalarField, v: ScalarField) -> float:
    """max over cells of |grad v - grad u / u_cell|."""
    gu = u.grad.values
    gv = v.grad.values
    diff = gv - gu / u.cell_values[:, None]
    return float(np.max(np.linalg.norm(diff, axis=1)))


def schro_residual(u: ScalarField, sigma: Weight, op: OperatorSpec, basis: Optional[ResidualBasis] = None,
                   tolerance: float = DEFAULT_TOLERANCE) -> ResidualCertificate:
    """r(phi) = int A(grad u).grad phi - <sigma, |u|^{p-2} u phi>."""
    mesh = u.mesh
    basis = basis or residual_basis(mesh, op.p)
    system = DiscreteSystem(op, mesh, potential=sigma.load_vector(mesh))
    return _certify("schro", system.residual(u.values, 1.0, 0.0), basis, tolerance)


def riccati_source_cells(v: ScalarField, op: OperatorSpec) -> np.ndarray:
    """Per-cell average of A(x, grad v).grad v."""
    mesh = v.mesh
    g = np.asarray(mesh.grad_q @ v.values).reshape(mesh.ncells, mesh.nq, mesh.ncomp)
    e = op.weight_on(mesh) * np.sum(g * g, axis=2) ** (op.p / 2.0)
    return np.sum(e * mesh.qweights, axis=1) / mesh.volumes


def ric_residual(v: ScalarField, sigma: Weight, op: OperatorSpec, basis: Optional[ResidualBasis] = None,
                 tolerance: float = DEFAULT_TOLERANCE) -> ResidualCertificate:
    """r(phi) = int A(grad v).grad phi - (p-1) int [A(grad v).grad v] phi - <sigma, phi>."""
    mesh = v.mesh
    basis = basis or residual_basis(mesh, op.p)
    system = DiscreteSystem(op, mesh)
    quad = mesh.lump.T @ (riccati_source_cells(v, op) * mesh.volumes)
    nodal = system.internal(v.values) - (op.p - 1.0) * quad - sigma.load_vector(mesh)
    return _certify("riccati", nodal, basis, tolerance)


# -- potentials ------------------------------------------------------------

def _radial_kernel(r: np.ndarray, s: np.ndarray, alpha: float, n: int, order: int = 64) -> np.ndarray:
    """Sphere average of |r e - s theta|^{alpha-n} over theta in S^{n-1}."""
    if alpha == 2.0 and n >= 3:
        return np.maximum(r, s) ** (2.0 - n)
    if alpha == 2.0 and n == 2:
        return np.ones(np.broadcast(r, s).shape)
    a = (n - 3) / 2.0
    t, wt = roots_jacobi(order, a, a)
    wt = wt / wt.sum()
    d2 = r[..., None] ** 2 + s[..., None] ** 2 - 2.0 * r[..., None] * s[..., None] * t
    return np.sum(wt * np.maximum(d2, 1e-300) ** ((alpha - n) / 2.0), axis=-1)


def _radial_log_kernel(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(r, s))


def _subshells(mesh: Mesh, cells: np.ndarray, m: int = 8):
    """Gauss points and volume weights splitting each listed shell into m pieces."""
    t, w = roots_legendre(m)
    lo = mesh.radii[cells][:, None]
    hi = mesh.radii[cells + 1][:, None]
    s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * t[None, :]
    vol = sphere_area(mesh.n) * 0.5 * (hi - lo) * w[None, :] * s ** (mesh.n - 1)
    return s, vol / vol.sum(axis=1, keepdims=True)


CHUNK = 64


def _sum_radial(mu: MeasureField, r: np.ndarray, kernel) -> np.ndarray:
    mesh = mu.mesh
    mass = mu.density * mesh.volumes
    s = mesh.centroids[:, 0]
    width = mesh.widths
    live = mass != 0
    out = np.zeros(r.shape[0])
    if not np.any(live):
        return out
    for start in range(0, r.shape[0], CHUNK):
        rs = r[start:start + CHUNK]
        out[start:start + CHUNK] = kernel(rs[:, None], s[None, live]) @ mass[live]
        pi, ci = np.nonzero((np.abs(rs[:, None] - s[None, :]) < 2.0 * width[None, :]) & live[None, :])
        if pi.size:
            sub, frac = _subshells(mesh, ci)
            fine = np.sum(kernel(rs[pi][:, None], sub) * frac, axis=1)
            coarse = kernel(rs[pi], s[ci])
            np.add.at(out, start + pi, mass[ci] * (fine - coarse))
    return out


def _sum_tensor(mu: MeasureField, x: np.ndarray, kernel, m: int = 4) -> np.ndarray:
    mesh = mu.mesh
    mass = mu.density * mesh.volumes
    y = mesh.centroids
    h = mesh.spacing
    diam = float(np.linalg.norm(h))
    grid = (np.arange(m) + 0.5) / m - 0.5
    offs = np.array(np.meshgrid(*[grid * h[k] for k in range(mesh.cdim)], indexing="ij")).reshape(mesh.cdim, -1).T
    live = mass != 0
    out = np.zeros(x.shape[0])
    if not np.any(live):
        return out
    for start in range(0, x.shape[0], CHUNK):
        xs = x[start:start + CHUNK]
        d = np.linalg.norm(xs[:, None, :] - y[None, :, :], axis=2)
        out[start:start + CHUNK] = kernel(d[:, live]) @ mass[live]
        pi, ci = np.nonzero((d < 2.0 * diam) & live[None, :])
        if pi.size:
            sub = y[ci][:, None, :] + offs[None, :, :]
            fine = np.mean(kernel(np.linalg.norm(xs[pi][:, None, :] - sub, axis=2)), axis=1)
            np.add.at(out, start + pi, mass[ci] * (fine - kernel(d[pi, ci])))
    return out


def _atom_terms(mu: MeasureField, x: np.ndarray, kernel) -> np.ndarray:
    out = np.zeros(x.shape[0])
    for pt, m in mu.atoms:
        if m == 0:
            continue
        d = np.abs(x[:, 0] - pt[0]) if mu.mesh.kind == "radial" else np.linalg.norm(x - np.asarray(pt), axis=1)
        if np.any(d == 0):
            raise InputError(f"evaluation point lies on the atom at {pt}")
        out += m * kernel(d)
    return out


def _points(mu: MeasureField, points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if mu.mesh.kind == "radial":
        return x.reshape(-1, 1)
    return x.reshape(-1, mu.mesh.cdim)


def riesz_potential(mu: MeasureField, alpha: float, points) -> np.ndarray:
    """I_alpha(mu)(x) = int |x - y|^{alpha - n} dmu(y) at the given points.

    Radial points are radii; the density sum uses the sphere-averaged kernel.
    """
    n = mu.mesh.n
    if not (0 < alpha < n):
        raise InputError(f"Riesz order must lie in (0, {n}), got {alpha}")
    x = _points(mu, points)
    power = lambda d: d ** (alpha - n)
    atoms = _atom_terms(mu, x, power)
    if mu.mesh.kind == "radial":
        dens = _sum_radial(mu, x[:, 0], lambda r, s: _radial_kernel(r, s, alpha, n))
    else:
        dens = _sum_tensor(mu, x, lambda d: np.maximum(d, 1e-300) ** (alpha - n))
    return dens + atoms


def green_solve(mu: MeasureField, params: ProblemParams, mesh: Mesh) -> ScalarField:
    """Newtonian potential of mu on the nodes of ``mesh``.

    n >= 3: c_n I_2(mu) with c_n = 1/((n-2) omega); n = 2: (1/2pi) int log|x-y| dmu.
    """
    n = params.n
    if n < 2:
        raise InputError("Green operator needs n >= 2")
    if mu.mesh.kind != mesh.kind:
        raise InputError("measure and target mesh kinds differ")
    pts = mesh.nodes[:, 0] if mesh.kind == "radial" else mesh.nodes
    if n >= 3:
        cn = 1.0 / ((n - 2) * params.omega)
        return ScalarField(mesh, cn * riesz_potential(mu, 2.0, pts))
    x = _points(mu, pts)
    logk = lambda d: np.log(d)
    atoms = _atom_terms(mu, x, logk)
    if mesh.kind == "radial":
        dens = _sum_radial(mu, x[:, 0], _radial_log_kernel)
    else:
        dens = _sum_tensor(mu, x, lambda d: np.log(np.maximum(d, 1e-300)))
    return ScalarField(mesh, (dens + atoms) / (2.0 * np.pi))


def _poisson_solve(mu: MeasureField, params: ProblemParams, mesh: Mesh) -> ScalarField:
    """w with -Laplace w = mu."""
    w = green_solve(mu, params, mesh)
    return w if params.n >= 3 else w.with_values(-w.values)


def gradient_bound_check(mu: MeasureField, params: ProblemParams, mesh: Mesh) -> Dict[str, float]:
    """max over cells of |grad w| / (c I_1(mu)) with c = 1/omega."""
    w = _poisson_solve(mu, params, mesh)
    grad = w.grad.magnitude()
    pts = mesh.centroids[:, 0] if mesh.kind == "radial" else mesh.centroids
    i1 = riesz_potential(mu, 1.0, pts)
    c = 1.0 / params.omega
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(i1 > 0, grad / (c * i1), 0.0)
    return {"worst_ratio": float(ratio.max()), "c": c, "max_grad": float(grad.max())}


# -- decomposition ---------------------------------------------------------

@dataclass
class DecomposeConfig:
    tolerance: float = DEFAULT_TOLERANCE
    truncations: int = 3
    solve: SolveConfig = field(default_factory=SolveConfig)
    restarts: int = 4
    seed: int = 0
    threads: Optional[int] = None
    capacity_balls: Optional[Sequence[Ball]] = None


def _origin(mesh: Mesh):
    return 0.0 if mesh.kind == "radial" else tuple([0.0] * mesh.cdim)


def _normalization_ball(mesh: Mesh) -> Ball:
    if mesh.kind == "radial":
        a, b = mesh.inner, mesh.outer
        if a == 0.0:
            return Ball(0.0, 0.99 * b / 8.0)
        return Ball(0.5 * (a + b), 0.99 * (b - a) / 16.0)
    c = tuple((0.5 * (mesh.lower + mesh.upper)).tolist())
    return Ball(c, 0.99 * float(np.min(mesh.upper - mesh.lower)) / 16.0)


def origin_ball_family(mesh: Mesh, count: int = 3) -> List[Ball]:
    """Concentric balls B(0, rho) strictly inside the mesh."""
    if mesh.kind == "radial":
        top = mesh.outer
        balls = [Ball(0.0, top * 2.0 ** (-k)) for k in range(1, count + 1)]
        return [b for b in balls if b.radius > mesh.inner]
    c = tuple((0.5 * (mesh.lower + mesh.upper)).tolist())
    span = float(np.min(mesh.upper - mesh.lower))
    return [Ball(c, span * 2.0 ** (-k - 1)) for k in range(1, count + 1)]


def _normalize_unit_ball(w: ScalarField) -> ScalarField:
    mesh = w.mesh
    wts = ball_cell_weights(mesh, Ball(_origin(mesh), 1.0))
    if wts.sum() <= 0:
        wts = mesh.volumes
    shift = (1.0 - np.dot(wts, w.cell_values)) / wts.sum()
    return w.with_values(w.values + shift)


def decompose_sigma(sigma: Weight, C0: float, op: OperatorSpec, mesh: Mesh,
                    cfg: Optional[DecomposeConfig] = None) -> DecompositionResult:
    """Gamma = -K A(x, grad v) + grad w with div Gamma = sigma, K = 2 C0 / (p-1)^{2-p}."""
    from .pipeline import ExhaustionSchedule, PipelineConfig, run_pipeline

    cfg = cfg or DecomposeConfig()
    params = op.params
    if params.p >= params.n and not sigma.is_zero():
        raise InputError(f"p >= n admits no nonzero decomposition (p={params.p}, n={params.n})")
    if C0 <= 0:
        raise InputError(f"C0 must be positive, got {C0}")
    p = params.p
    K = 2.0 * C0 / (p - 1.0) ** (2.0 - p)
    sigma_t = sigma.scaled(1.0 / K)

    schedule = ExhaustionSchedule.single(mesh, _normalization_ball(mesh))
    pcfg = PipelineConfig(solve=cfg.solve, restarts=cfg.restarts, seed=cfg.seed, mollify=False,
                          threads=cfg.threads, tolerance=cfg.tolerance)
    trace = run_pipeline(op, sigma_t, schedule, pcfg)
    v = trace.v

    source_cells = riccati_source_cells(v, op)
    mu = MeasureField(mesh, np.maximum(v.grad.magnitude() ** p, 0.0))
    poisson = MeasureField(mesh, np.maximum(K * (p - 1.0) * source_cells, 0.0))

    if mesh.kind == "radial":
        top = mesh.outer
    else:
        top = float(np.linalg.norm(np.maximum(np.abs(mesh.lower), np.abs(mesh.upper))))
    radii = [top * 2.0 ** (k - cfg.truncations + 1) for k in range(cfg.truncations)]
    w_prev = None
    gap = float("nan")
    for rad in radii:
        w_n = _normalize_unit_ball(_poisson_solve(poisson.truncated(rad), params, mesh))
        if w_prev is not None:
            gap = float(np.max(np.abs(w_n.values - w_prev.values)))
        w_prev = w_n
    w = w_prev

    Gamma = VectorField(mesh, -K * flux(op.weight_cells(mesh), v.grad.values, p) + w.grad.values)

    basis = residual_basis(mesh, p)
    nodal = (sigma.load_vector(mesh)
             - K * DiscreteSystem(op, mesh).internal(v.values)
             + DiscreteSystem(OperatorSpec.p_laplacian(ProblemParams(params.n, 2.0)), mesh).internal(w.values))
    cert = _certify("divergence-match", nodal, basis, cfg.tolerance)

    balls = list(cfg.capacity_balls) if cfg.capacity_balls is not None else origin_ball_family(mesh)
    balls = [b for b in balls if ball_inside(mesh, b)]
    cc: Optional[CapacityConditionReport] = None
    ratio = 0.0
    if balls:
        cc = capacity_condition(Gamma, balls, mesh, params)
        ratio = cc.worst
    logger.info("decomposition: K=%.6g, divergence residual %.3e, capacity ratio %.6g, stabilization gap %.3e",
                K, cert.max_residual, ratio, gap)
    return DecompositionResult(v, mu, w, Gamma, ratio, cert, K, gap,
                               cc.rows if cc is not None else None, radii)


def supercritical_degeneracy_check(params: ProblemParams, meshes: Sequence[Mesh], rho: float = 1.0,
                                   cfg: Optional[SolveConfig] = None) -> Dict[str, object]:
    """cap_p(B(0, rho)) in growing radial domains for p >= n, with the fitted decay rate."""
    if params.p < params.n:
        raise InputError(f"degeneracy check needs p >= n (p={params.p}, n={params.n})")
    if len(meshes) < 2:
        raise InputError("degeneracy check needs at least two domains")
    rows = []
    for mesh in meshes:
        rep = capacity(Ball(_origin(mesh), rho), mesh, params, cfg)
        R = mesh.outer if mesh.kind == "radial" else float(np.min(mesh.upper - mesh.lower)) / 2.0
        exact = condenser_capacity(params, rho, R) if mesh.kind == "radial" else float("nan")
        rows.append({"R": R, "capacity": rep.cap, "closed_form": exact})
    df = pd.DataFrame(rows).sort_values("R").reset_index(drop=True)
    caps = df["capacity"].to_numpy()
    if params.p == params.n:
        x = np.log(np.log(df["R"].to_numpy() / rho))
        law = "(log R)^(1-p)"
    else:
        x = np.log(df["R"].to_numpy())
        law = "R^((p-n)/(p-1))"
    slope = fit_rate(x, np.log(caps))
    decreasing = bool(np.all(np.diff(caps) < 0))
    logger.info("supercritical capacities %s, fitted slope %.4f against %s", caps.tolist(), slope, law)
    return {"table": df, "slope": slope, "law": law, "decreasing": decreasing}
