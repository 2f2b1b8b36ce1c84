"""
Measured constants: form bounds, p-capacities, the capacity condition, and the
BMO / doubling / weak reverse Hoelder statistics.

All suprema are taken over a finite tested family (restarts, balls, compact
sets), so every reported constant is a lower bound for its continuum value.
"""
from __future__ import annotations
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import splu, spsolve

from .core import (Ball, Mesh, ProblemParams, ScalarField, VectorField, ball_cell_weights, ball_inside,
                   ball_lattice, ball_node_mask, cell_values)
from .errors import InputError
from .operators import OperatorSpec
from .solver import DiscreteSystem, SolveConfig, solve_dirichlet
from .weights import Weight

if TYPE_CHECKING:
    from .decompose import ResidualCertificate

logger = logging.getLogger(__name__)

CompactSet = Union[Ball, np.ndarray]


@dataclass
class FormBoundReport:
    lambda_hat: Optional[float]
    Lambda_hat: Optional[float]
    maximizer: Optional[ScalarField]
    restarts: int
    mesh_id: str
    values: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "mesh_id": self.mesh_id,
            "lambda_hat": self.lambda_hat,
            "Lambda_hat": self.Lambda_hat,
            "restarts": self.restarts,
        }


@dataclass
class CapacityReport:
    cap: float
    minimizer: ScalarField
    compact: str
    feasibility_margin: float
    iterations: int = 0


@dataclass
class CapacityConditionReport:
    rows: pd.DataFrame
    worst: float


@dataclass
class DoublingReport:
    ratios: pd.DataFrame
    worst: float
    wrh: pd.DataFrame
    wrh_worst: float
    bmo_log: Optional[float]


# -- form bounds -----------------------------------------------------------

class _Quotient:
    """R(h) = sum s |h|^p / int A(grad h).grad h on the free nodes of one mesh."""

    def __init__(self, s: np.ndarray, op: OperatorSpec, mesh: Mesh):
        self.mesh = mesh
        self.free = mesh.interior
        self.p = op.p
        self.s = s
        self.system = DiscreteSystem(op, mesh)
        self._lu = None
        self._lock = threading.Lock()
        if self.p == 2.0:
            K = self.system.stiffness(np.zeros(mesh.npts), 0.0, secant=True)
            self._lu = splu(K[self.free][:, self.free].tocsc())

    def full(self, x: np.ndarray) -> np.ndarray:
        h = np.zeros(self.mesh.npts)
        h[self.free] = x
        return h

    def parts(self, x: np.ndarray) -> Tuple[float, float]:
        h = self.full(x)
        g = self.system.gradients(h)
        den = float(np.sum(self.system.qw * self.system.w * np.sum(g * g, axis=1) ** (self.p / 2.0)))
        num = float(np.dot(self.s, np.abs(h) ** self.p))
        return num, den

    def value(self, x: np.ndarray) -> float:
        num, den = self.parts(x)
        if not den > 1e-300:
            return float("nan")
        return num / den

    def precondition(self, x: np.ndarray) -> Optional[np.ndarray]:
        """K_x^{-1} (s |x|^{p-2} x) with K_x the frozen-coefficient stiffness."""
        rhs = (self.s * np.sign(self.full(x)) * np.abs(self.full(x)) ** (self.p - 1.0))[self.free]
        if self._lu is not None:
            with self._lock:
                return self._lu.solve(rhs)
        h = self.full(x)
        g = self.system.gradients(h)
        scale = float(np.max(np.linalg.norm(g, axis=1))) or 1.0
        K = self.system.stiffness(h, 1e-8 * scale, secant=True)[self.free][:, self.free]
        try:
            return spsolve(K.tocsc(), rhs)
        except (RuntimeError, ValueError):
            return None


def _ascend(quot: _Quotient, x0: np.ndarray, max_iter: int = 200, rtol: float = 1e-10) -> Tuple[float, np.ndarray]:
    """Preconditioned projected ascent; returns (value, maximizer on free nodes)."""
    x = x0 / np.max(np.abs(x0))
    R = quot.value(x)
    if not np.isfinite(R):
        return float("nan"), x
    for _ in range(max_iter):
        y = quot.precondition(x)
        if y is None or not np.all(np.isfinite(y)):
            break
        d = y - R * x if R > 0 else y
        nd = np.linalg.norm(d)
        if nd == 0:
            break
        trials = ([1.0 / R] if R > 0 else []) + [np.linalg.norm(x) / nd * 2.0 ** (-k) for k in range(12)]
        improved = False
        for theta in trials:
            cand = x + theta * d
            m = np.max(np.abs(cand))
            if m == 0:
                continue
            cand = cand / m
            Rc = quot.value(cand)
            if np.isfinite(Rc) and Rc > R:
                change = (Rc - R) / max(abs(Rc), 1e-300)
                x, R, improved = cand, Rc, True
                break
        if not improved or change < rtol:
            break
    return R, x


def _structured_starts(mesh: Mesh, params: ProblemParams) -> List[np.ndarray]:
    pts = mesh.nodes
    starts = []
    if mesh.kind == "radial":
        r = mesh.radii
        a, b = mesh.inner, mesh.outer
        if a > 0:
            L = np.log(b / a)
            phase = np.sin(np.pi * (np.log(r) - np.log(a)) / L)
            for beta in ((params.p - params.n) / params.p, 0.0, 1.0):
                starts.append(r ** beta * phase)
        else:
            s = r / b
            starts.append(np.sinc(s))
            starts.append(np.cos(0.5 * np.pi * s))
            starts.append(1.0 - s ** 2)
    else:
        lo, hi = mesh.lower, mesh.upper
        prod = np.prod(np.sin(np.pi * (pts - lo) / (hi - lo)), axis=1)
        starts.append(prod)
        c = 0.5 * (lo + hi)
        d = np.linalg.norm(pts - c, axis=1)
        for beta in ((params.p - params.n) / params.p, 1.0):
            starts.append(prod * np.maximum(d, 1e-3 * float(np.min(hi - lo))) ** beta)
    return [v[mesh.interior] for v in starts]


def _random_starts(mesh: Mesh, restarts: int, seed: int) -> List[np.ndarray]:
    seqs = np.random.SeedSequence(seed).spawn(restarts)
    return [np.random.default_rng(s).random(int(mesh.interior.sum())) + 0.05 for s in seqs]


def _best_ratio(s: np.ndarray, op: OperatorSpec, mesh: Mesh, restarts: int, seed: int,
                threads: Optional[int]) -> Tuple[float, Optional[np.ndarray], int]:
    if not np.any(mesh.interior):
        raise InputError(f"mesh {mesh.mesh_id} has no interior nodes")
    if not np.any(s > 0):
        return 0.0, None, 0
    quot = _Quotient(s, op, mesh)
    starts = _structured_starts(mesh, op.params) + _random_starts(mesh, restarts, seed)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda x0: _ascend(quot, x0), starts))
    finite = [(i, R, x) for i, (R, x) in enumerate(results) if np.isfinite(R)]
    if not finite:
        raise InputError("every form-bound restart was degenerate")
    i, R, x = max(finite, key=lambda item: (item[1], -item[0]))
    logger.debug("form bound: best start %d of %d, value %.10g", i, len(starts), R)
    return max(R, 0.0), quot.full(x), len(finite)


def estimate_form_bound(sigma: Weight, op: OperatorSpec, mesh: Mesh, sign: str = "upper",
                        restarts: int = 8, seed: int = 0, threads: Optional[int] = None) -> FormBoundReport:
    """Measured lambda (``upper``), Lambda (``lower``) or both.

    Maximizes +-<sigma, |h|^p> / int A(x, grad h).grad h over zero-trace h.
    """
    assert sign in {"upper", "lower", "both"}
    if restarts < 0:
        raise InputError("restarts must be >= 0")
    load = sigma.load_vector(mesh)
    lam = Lam = None
    maximizer = None
    used = 0
    if sign in {"upper", "both"}:
        lam, h, used = _best_ratio(load, op, mesh, restarts, seed, threads)
        maximizer = ScalarField(mesh, h) if h is not None else None
    if sign in {"lower", "both"}:
        Lam, h, n_low = _best_ratio(-load, op, mesh, restarts, seed, threads)
        used = max(used, n_low)
        if maximizer is None and h is not None:
            maximizer = ScalarField(mesh, h)
    logger.info("form bound on %s: lambda=%s Lambda=%s (upper/lower form-bound constants)",
                mesh.mesh_id, lam, Lam)
    return FormBoundReport(lam, Lam, maximizer, used, mesh.mesh_id)


def rayleigh_quotient(sigma: Weight, op: OperatorSpec, h: ScalarField) -> float:
    """<sigma, |h|^p> / int A(x, grad h).grad h for one zero-trace h."""
    quot = _Quotient(sigma.load_vector(h.mesh), op, h.mesh)
    return quot.value(h.values[h.mesh.interior])


def hardy_annulus_value(params: ProblemParams, t: float, a: float, b: float = 1.0) -> float:
    """Exact Dirichlet value of the p = 2 Hardy quotient on the annulus [a, b]."""
    if params.p != 2.0:
        raise InputError("the closed-form annulus value needs p = 2")
    if params.c0 is None or not (0 < a < b):
        raise InputError(f"annulus value needs n > 2 and 0 < a < b, got a={a}, b={b}")
    L = np.log(b / a)
    c0 = params.c0
    return float(t * c0 / (c0 + (np.pi / L) ** 2))


def form_bounds_from_riccati(v: ScalarField, op: OperatorSpec, C0: float,
                             certificate: Optional["ResidualCertificate"] = None) -> Tuple[float, float]:
    """(lambda, Lambda) = ((M/m)^p, M(2 M C0 + 1)) for a certified Riccati solution v."""
    if certificate is None or not certificate.passed:
        raise InputError("form bounds from the Riccati route need a passed residual certificate")
    if certificate.equation != "riccati":
        raise InputError(f"expected a riccati certificate, got {certificate.equation}")
    if C0 < 0:
        raise InputError("C0 must be >= 0")
    lam = (op.M / op.m) ** op.p
    Lam = op.M * (2.0 * op.M * C0 + 1.0)
    logger.info("form bounds from certified log solution on %s: lambda=%g Lambda=%g",
                v.mesh.mesh_id, lam, Lam)
    return float(lam), float(Lam)


# -- capacity --------------------------------------------------------------

def compact_node_mask(mesh: Mesh, E: CompactSet) -> np.ndarray:
    if isinstance(E, Ball):
        return ball_node_mask(mesh, E)
    mask = np.asarray(E, dtype=bool)
    if mask.shape == (mesh.ncells,):
        nodes = np.zeros(mesh.npts, dtype=bool)
        nodes[np.unique(mesh.cells[mask])] = True
        return nodes
    if mask.shape != (mesh.npts,):
        raise InputError("compact set mask must match nodes or cells")
    return mask


def compact_cell_weights(mesh: Mesh, E: CompactSet) -> np.ndarray:
    if isinstance(E, Ball):
        return ball_cell_weights(mesh, E)
    mask = np.asarray(E, dtype=bool)
    if mask.shape == (mesh.npts,):
        mask = np.all(mask[mesh.cells], axis=1)
    return np.where(mask, mesh.volumes, 0.0)


def _describe(E: CompactSet) -> str:
    if isinstance(E, Ball):
        return f"ball(c={E.center}, r={E.radius:g})"
    return f"set({int(np.count_nonzero(E))})"


def _outer_boundary(mesh: Mesh) -> np.ndarray:
    if mesh.kind == "radial":
        mask = np.zeros(mesh.npts, dtype=bool)
        mask[-1] = True
        return mask
    return mesh.boundary.copy()


def capacity(E: CompactSet, mesh: Mesh, params: ProblemParams, cfg: Optional[SolveConfig] = None,
             op: Optional[OperatorSpec] = None) -> CapacityReport:
    """cap_p(E, domain): the energy of the p-harmonic h with h = 1 on E and zero trace."""
    cfg = cfg or SolveConfig(continuation_steps=1 if params.p == 2 else 4)
    op = op or OperatorSpec.p_laplacian(params)
    in_E = compact_node_mask(mesh, E)
    if not np.any(in_E):
        raise InputError(f"compact set {_describe(E)} contains no nodes")
    if np.any(in_E & _outer_boundary(mesh)):
        raise InputError(f"compact set {_describe(E)} touches the domain boundary")
    fixed = mesh.boundary | in_E
    trace = np.where(in_E, 1.0, 0.0)
    result = solve_dirichlet(op, None, trace, mesh, cfg, fixed=fixed)
    h = result.u
    g = DiscreteSystem(op, mesh).gradients(h.values)
    energy = float(np.sum(mesh.qweights.reshape(-1) * op.weight_on(mesh).reshape(-1)
                          * np.sum(g * g, axis=1) ** (params.p / 2.0)))
    margin = float(np.min(h.values[in_E]) - 1.0)
    logger.info("capacity of %s on %s: %.10g", _describe(E), mesh.mesh_id, energy)
    return CapacityReport(max(energy, 0.0), h, _describe(E), margin, result.iterations)


def condenser_capacity(params: ProblemParams, rho: float, R: float) -> float:
    """Closed-form cap_p(B(0, rho), B(0, R))."""
    if not (0 < rho < R):
        raise InputError(f"condenser needs 0 < rho < R, got rho={rho}, R={R}")
    n, p = params.n, params.p
    omega = params.omega
    if p == n:
        return float(omega * np.log(R / rho) ** (1.0 - n))
    e = (p - n) / (p - 1.0)
    return float(omega * abs((n - p) / (p - 1.0)) ** (p - 1.0) * abs(rho ** e - R ** e) ** (1.0 - p))


def capacity_condition(Gamma: VectorField, compacts: Sequence[CompactSet], mesh: Mesh, params: ProblemParams,
                       cfg: Optional[SolveConfig] = None) -> CapacityConditionReport:
    """sup over the family of int_E |Gamma|^{p'} / cap_p(E)."""
    if not compacts:
        raise InputError("capacity condition needs a nonempty compact family")
    mag = Gamma.magnitude() ** params.p_conj
    rows = []
    for E in compacts:
        num = float(np.dot(compact_cell_weights(mesh, E), mag))
        cap = capacity(E, mesh, params, cfg).cap
        if cap > 0:
            ratio = num / cap
        else:
            ratio = float("inf") if num > 0 else 0.0
        rows.append({"compact": _describe(E), "numerator": num, "capacity": cap, "ratio": ratio})
    df = pd.DataFrame(rows)
    worst = float(df["ratio"].max())
    logger.info("capacity condition over %d sets: worst ratio %.6g", len(rows), worst)
    return CapacityConditionReport(df, worst)


# -- BMO, doubling, weak reverse Hoelder -----------------------------------

def _ball_means(values: np.ndarray, mesh: Mesh, balls: Sequence[Ball]) -> np.ndarray:
    out = np.empty(len(balls))
    for i, ball in enumerate(balls):
        wts = ball_cell_weights(mesh, ball)
        tot = wts.sum()
        if tot <= 0:
            raise InputError(f"ball {ball} contains no cells")
        out[i] = np.dot(wts, values) / tot
    return out


def _admissible(mesh: Mesh, balls: Optional[Sequence[Ball]], enlargement: float) -> List[Ball]:
    if balls is None:
        return ball_lattice(mesh, enlargement)
    keep = [b for b in balls if ball_inside(mesh, b.scaled(enlargement))]
    if len(keep) < len(balls):
        logger.debug("dropped %d balls whose %gx enlargement exits the mesh", len(balls) - len(keep), enlargement)
    return keep


def ball_oscillations(u: Union[ScalarField, np.ndarray], mesh: Mesh, exponent: float,
                      balls: Optional[Sequence[Ball]] = None) -> pd.DataFrame:
    """Mean p-oscillation of u over each admissible ball."""
    vals = cell_values(u, mesh)
    rows = []
    for ball in _admissible(mesh, balls, 2.0):
        wts = ball_cell_weights(mesh, ball)
        tot = wts.sum()
        if tot <= 0:
            continue
        mean = np.dot(wts, vals) / tot
        osc = np.dot(wts, np.abs(vals - mean) ** exponent) / tot
        rows.append({"center": ball.center, "radius": ball.radius, "oscillation": float(osc)})
    return pd.DataFrame(rows, columns=["center", "radius", "oscillation"])


def bmo_seminorm(u: Union[ScalarField, np.ndarray], mesh: Mesh, exponent: float,
                 balls: Optional[Sequence[Ball]] = None) -> float:
    """max over balls with B(x, 2r) inside the domain of the mean |u - avg u|^exponent."""
    df = ball_oscillations(u, mesh, exponent, balls)
    if df.empty:
        raise InputError(f"no admissible balls on {mesh.mesh_id}")
    return float(df["oscillation"].max())


def doubling_and_wrh(w: Union[ScalarField, np.ndarray], mesh: Mesh, q: float,
                     balls: Optional[Sequence[Ball]] = None) -> DoublingReport:
    """Doubling ratios avg(B_2r)/avg(B_r), WRH constants and BMO(log w)."""
    vals = cell_values(w, mesh)
    if np.any(vals < 0):
        raise InputError("doubling statistics need w >= 0")
    if q < 1:
        raise InputError(f"reverse Hoelder exponent must be >= 1, got {q}")
    dballs = _admissible(mesh, balls, 4.0)
    if not dballs:
        raise InputError(f"no admissible doubling balls on {mesh.mesh_id}")
    small = _ball_means(vals, mesh, dballs)
    big = _ball_means(vals, mesh, [b.scaled(2.0) for b in dballs])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(small > 0, big / small, np.inf)
    ratios = pd.DataFrame({"center": [b.center for b in dballs], "radius": [b.radius for b in dballs],
                           "ratio": ratio})

    wballs = _admissible(mesh, balls, 2.0)
    top = _ball_means(vals ** q, mesh, wballs) ** (1.0 / q)
    ref = _ball_means(vals, mesh, [b.scaled(2.0) for b in wballs])
    with np.errstate(divide="ignore", invalid="ignore"):
        const = np.where(ref > 0, top / ref, np.where(top > 0, np.inf, 1.0))
    wrh = pd.DataFrame({"center": [b.center for b in wballs], "radius": [b.radius for b in wballs],
                        "q": q, "constant": const})
    bmo_log = None
    if np.all(vals > 0):
        bmo_log = bmo_seminorm(np.log(vals), mesh, 2.0, wballs if balls is not None else None)
    worst = float(ratios["ratio"].max())
    wrh_worst = float(wrh["constant"].max()) if len(wrh) else float("nan")
    logger.info("doubling %.6g, weak reverse Hoelder %.6g, BMO(log w) %s", worst, wrh_worst, bmo_log)
    return DoublingReport(ratios, worst, wrh, wrh_worst, bmo_log)
