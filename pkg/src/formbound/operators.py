"""
The structure map A(x, xi) = w(x) |xi|^{p-2} xi and its validation.

Three kinds are supported: the p-Laplacian (w = 1), a scalar weight given as a
function of position, and a per-cell weight table read from CSV. Every kind is
p-1 homogeneous in xi.
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .core import Mesh, ProblemParams, Region, convolve_points, table_source
from .errors import InputError

logger = logging.getLogger(__name__)

OPERATOR_KINDS = {"p-laplacian", "scalar-weighted", "user-tabulated"}
HOMOGENEITY_TOL = 1e-12


def flux(weight: np.ndarray, xi: np.ndarray, p: float, delta: float = 0.0) -> np.ndarray:
    """w |xi|_delta^{p-2} xi over the trailing axis of ``xi``."""
    s2 = np.sum(xi * xi, axis=-1)
    if delta > 0:
        mag = (s2 + delta * delta) ** ((p - 2.0) / 2.0)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            mag = np.where(s2 > 0, s2 ** ((p - 2.0) / 2.0), 0.0)
    return (np.asarray(weight) * mag)[..., None] * xi


def flux_jacobian(weight: np.ndarray, xi: np.ndarray, p: float, delta: float = 0.0) -> np.ndarray:
    """d flux / d xi, shape (..., k, k)."""
    s2 = np.sum(xi * xi, axis=-1) + delta * delta
    k = xi.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        base = np.where(s2 > 0, s2 ** ((p - 2.0) / 2.0), 0.0)
        ratio = np.where(s2 > 0, (p - 2.0) / s2, 0.0)
    outer = xi[..., :, None] * xi[..., None, :]
    eye = np.broadcast_to(np.eye(k), outer.shape)
    return (np.asarray(weight) * base)[..., None, None] * (eye + ratio[..., None, None] * outer)


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    kind: str
    params: ProblemParams
    m: float = 1.0
    M: float = 1.0
    c: Optional[float] = None
    weight_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    weight_table: Optional[np.ndarray] = None
    table_mesh: Optional[Mesh] = None
    domain: Optional[Region] = None
    omega: Optional[Tuple[np.ndarray, np.ndarray]] = None
    validated: bool = True
    mollified_eps: float = 0.0
    label: str = field(default="")

    def __post_init__(self):
        assert self.kind in OPERATOR_KINDS, self.kind
        if not (0 < self.m <= self.M):
            raise InputError(f"operator constants must satisfy 0 < m <= M, got m={self.m}, M={self.M}")
        if self.kind == "scalar-weighted" and self.weight_fn is None:
            raise InputError("scalar-weighted operator needs a weight function")
        if self.kind == "user-tabulated":
            if self.weight_table is None or self.table_mesh is None:
                raise InputError("user-tabulated operator needs a weight table and its mesh")
            tab = np.asarray(self.weight_table, dtype=float)
            if tab.shape != (self.table_mesh.ncells,):
                raise InputError(f"weight table has {tab.shape[0]} rows for {self.table_mesh.ncells} cells")
            object.__setattr__(self, "weight_table", tab)
            if self.domain is None:
                object.__setattr__(self, "domain", self.table_mesh.region)
        if self.c is None:
            p = self.params.p
            c = self.m * 2.0 ** (2.0 - p) if p >= 2 else self.m * (p - 1.0)
            object.__setattr__(self, "c", c)

    @property
    def p(self) -> float:
        return self.params.p

    @property
    def spatially_constant(self) -> bool:
        return self.kind == "p-laplacian"

    def weight_at(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "p-laplacian":
            return np.ones(pts.shape[0])
        if self.weight_fn is not None:
            return np.broadcast_to(np.asarray(self.weight_fn(pts), dtype=float), (pts.shape[0],)).copy()
        return table_source(self.table_mesh, self.weight_table)(pts)

    def weight_on(self, mesh: Mesh) -> np.ndarray:
        """Weights at quadrature points, shape (ncells, nq)."""
        if self.kind == "p-laplacian":
            return np.ones((mesh.ncells, mesh.nq))
        if self.weight_fn is None and mesh is self.table_mesh:
            return np.repeat(self.weight_table[:, None], mesh.nq, axis=1)
        pts = mesh.qpoints.reshape(-1, mesh.cdim)
        return self.weight_at(pts).reshape(mesh.ncells, mesh.nq)

    def weight_cells(self, mesh: Mesh) -> np.ndarray:
        if self.kind == "p-laplacian":
            return np.ones(mesh.ncells)
        if self.weight_fn is None and mesh is self.table_mesh:
            return self.weight_table.copy()
        return self.weight_at(mesh.centroids)

    @classmethod
    def p_laplacian(cls, params: ProblemParams) -> "OperatorSpec":
        return cls("p-laplacian", params, 1.0, 1.0, label="p-laplacian")

    @classmethod
    def scalar_weighted(cls, params: ProblemParams, weight_fn: Callable[[np.ndarray], np.ndarray],
                        m: float, M: float, domain: Optional[Region] = None) -> "OperatorSpec":
        return cls("scalar-weighted", params, m, M, weight_fn=weight_fn, domain=domain,
                   label="scalar-weighted")

    @classmethod
    def tabulated(cls, params: ProblemParams, mesh: Mesh, table: np.ndarray) -> "OperatorSpec":
        tab = np.asarray(table, dtype=float)
        if np.any(tab <= 0) or not np.all(np.isfinite(tab)):
            raise InputError("tabulated operator weights must be positive and finite")
        return cls("user-tabulated", params, float(tab.min()), float(tab.max()),
                   weight_table=tab, table_mesh=mesh, validated=False, label="user-tabulated")


def eval_A(op: OperatorSpec, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """A(x, xi) for one point or a batch; A(x, 0) = 0."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise InputError("xi must be finite")
    single = xi.ndim == 1
    xi2 = np.atleast_2d(xi)
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    if x2.shape[0] == 1 and xi2.shape[0] > 1:
        x2 = np.repeat(x2, xi2.shape[0], axis=0)
    out = flux(op.weight_at(x2), xi2, op.p)
    return out[0] if single else out


def energy_density(op: OperatorSpec, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
    return np.sum(eval_A(op, x, xi) * np.atleast_2d(xi), axis=-1)


@dataclass
class StructureReport:
    margins: Dict[str, float]
    passed: Dict[str, bool]
    witnesses: Dict[str, Optional[Dict]]
    c_measured: float
    omega: Tuple[np.ndarray, np.ndarray]
    samples: int

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def failures(self) -> Dict[str, Optional[Dict]]:
        return {k: self.witnesses.get(k) for k, v in self.passed.items() if not v}


def _sample_points(op: OperatorSpec, rng: np.random.Generator, k: int) -> np.ndarray:
    region = op.domain
    if region is None and op.table_mesh is not None:
        region = op.table_mesh.region
    if region is None:
        return rng.uniform(0.0, 1.0, size=(k, op.params.n))
    lo = np.asarray(region.lower, dtype=float)
    hi = np.asarray(region.upper, dtype=float)
    if region.kind == "radial" and (lo[0] == 0.0 and region.punctured):
        lo = lo + 1e-3 * (hi - lo)
    return rng.uniform(lo, hi, size=(k, lo.size))


def _random_vectors(rng: np.random.Generator, k: int, n: int) -> np.ndarray:
    direction = rng.normal(size=(k, n))
    scale = 10.0 ** rng.uniform(-2.0, 2.0, size=(k, 1))
    return direction * scale


def validate_structure(op: OperatorSpec, samples: int = 1000, seed: int = 0) -> StructureReport:
    """Sample (x, xi, eta, t) and check ellipticity, boundedness, homogeneity,
    monotonicity, midpoint convexity; record an empirical continuity modulus."""
    if samples < 100:
        raise InputError(f"validate_structure needs samples >= 100, got {samples}")
    rng = np.random.default_rng(seed)
    n, p = op.params.n, op.params.p
    x = _sample_points(op, rng, samples)
    xi = _random_vectors(rng, samples, n)
    eta = _random_vectors(rng, samples, n)
    w = op.weight_at(x)
    A_xi = flux(w, xi, p)
    A_eta = flux(w, eta, p)
    nxi = np.linalg.norm(xi, axis=1)

    margins: Dict[str, float] = {}
    witnesses: Dict[str, Optional[Dict]] = {}

    def record(name: str, values: np.ndarray, tol: float = -1e-12):
        i = int(np.argmin(values))
        margins[name] = float(values[i])
        witnesses[name] = None if values[i] >= tol else {
            "x": x[i].tolist(), "xi": xi[i].tolist(), "eta": eta[i].tolist(), "value": float(values[i])
        }

    record("ellipticity", np.sum(A_xi * xi, axis=1) / nxi ** p - op.m)
    record("boundedness", op.M - np.linalg.norm(A_xi, axis=1) / nxi ** (p - 1.0))

    hom_err = np.zeros(samples)
    for t in (-2.0, -1.0, 0.5, 3.0):
        lhs = flux(w, t * xi, p)
        rhs = abs(t) ** (p - 2.0) * t * A_xi
        scale = abs(t) ** (p - 1.0) * np.linalg.norm(A_xi, axis=1)
        hom_err = np.maximum(hom_err, np.linalg.norm(lhs - rhs, axis=1) / scale)
    record("homogeneity", HOMOGENEITY_TOL - hom_err, tol=0.0)

    diff = xi - eta
    nd = np.linalg.norm(diff, axis=1)
    inner = np.sum((A_xi - A_eta) * diff, axis=1)
    if p >= 2:
        mono = inner / nd ** p
    else:
        neta = np.linalg.norm(eta, axis=1)
        mono = inner * (nxi ** (2.0 - p) + neta ** (2.0 - p)) / nd ** 2
    c_measured = float(mono.min())
    record("monotonicity", (mono - op.c) / op.c)

    def energy(v):
        return np.sum(flux(w, v, p) * v, axis=1)

    mid = 0.5 * (xi + eta)
    conv = (0.5 * (energy(xi) + energy(eta)) - energy(mid)) / (energy(xi) + energy(eta))
    record("convexity", conv)

    # empirical continuity modulus of x -> A(x, xi)/|xi|^{p-1}
    y = _sample_points(op, rng, samples)
    dist = np.linalg.norm(x - y, axis=1)
    jump = np.abs(op.weight_at(x) - op.weight_at(y))
    order = np.argsort(dist)
    omega = (np.concatenate([[0.0], dist[order]]),
             np.concatenate([[0.0], np.maximum.accumulate(jump[order])]))

    passed = {k: witnesses[k] is None for k in margins}
    report = StructureReport(margins, passed, witnesses, c_measured, omega, samples)
    for name, wit in report.failures().items():
        logger.warning("structure condition %s violated at %s", name, wit)
    return report


def mark_validated(op: OperatorSpec, report: StructureReport) -> OperatorSpec:
    """Return ``op`` flagged as validated when the report passes."""
    if not report.ok:
        return op
    return replace(op, validated=True, omega=report.omega)


def minkowski_ratio(op: OperatorSpec, mesh: Mesh, g1: np.ndarray, g2: np.ndarray) -> Optional[float]:
    """L(g1 + g2) / (L(g1) + L(g2)) with L(G) = (int A(., G).G)^{1/p}; None if both vanish."""
    w = op.weight_cells(mesh)
    p = op.p

    def L(g):
        return float(np.dot(mesh.volumes, np.sum(flux(w, g, p) * g, axis=1))) ** (1.0 / p)

    den = L(g1) + L(g2)
    if den == 0.0:
        return None
    return L(g1 + g2) / den


def _smooth_random_field(mesh: Mesh, rng: np.random.Generator, modes: int = 4) -> np.ndarray:
    x = mesh.centroids
    span = np.maximum(mesh.upper - mesh.lower, 1e-12)
    out = np.zeros((mesh.ncells, mesh.ncomp))
    for _ in range(modes):
        k = rng.integers(1, 4, size=mesh.cdim) * np.pi / span
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.normal(size=mesh.ncomp)
        out += amp[None, :] * np.sin(x @ k + phase)[:, None]
    return out


def minkowski_check(op: OperatorSpec, mesh: Mesh, trials: int = 100, seed: int = 0) -> float:
    """Worst L(G1+G2)/(L(G1)+L(G2)) over random smooth fields; should not exceed 1."""
    if trials < 10:
        raise InputError(f"minkowski_check needs trials >= 10, got {trials}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        ratio = minkowski_ratio(op, mesh, _smooth_random_field(mesh, rng), _smooth_random_field(mesh, rng))
        if ratio is not None:
            worst = max(worst, ratio)
    return worst


def mollify_operator(op: OperatorSpec, eps: float, mesh: Mesh) -> OperatorSpec:
    """A_eps(x, xi) = int phi_eps(y) A(x + y, xi) dy on the subdomain covered by ``mesh``."""
    if eps < 0:
        raise InputError("eps must be >= 0")
    if op.spatially_constant or eps == 0:
        return op
    if op.domain is not None:
        target = mesh.region
        if not op.domain.contains(target) or target.gap_to(op.domain) <= eps:
            raise InputError(
                f"eps={eps} too large: mesh lies within {target.gap_to(op.domain):.3g} of the operator domain boundary"
            )
    base = op.weight_at
    kind = mesh.kind
    spacing = mesh.spacing if kind == "tensor" else None

    def smoothed(points: np.ndarray) -> np.ndarray:
        return convolve_points(base, eps, points, kind, spacing)

    return replace(
        op,
        kind="scalar-weighted",
        weight_fn=smoothed,
        weight_table=None,
        table_mesh=None,
        domain=mesh.region,
        omega=None,
        mollified_eps=float(eps),
        label=f"{op.label or op.kind}*phi_{eps:.3g}",
    )
