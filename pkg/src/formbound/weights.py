"""
Distributional potentials sigma = f + div(Gamma) and nonnegative measures.

A Weight stores its density part f and divergence part Gamma as *parts*:
pointwise functions, per-cell tables bound to a mesh, or linear combinations
of those. Pairing against a nodal test function phi is

    <sigma, phi> = int f phi - int Gamma . grad(phi)

with f integrated by the lumped nodal rule and Gamma against the cellwise
gradient of phi.
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (Ball, Mesh, ProblemParams, Region, ScalarField, VectorField, ball_cell_weights,
                   convolve_points, table_source)
from .errors import InputError

logger = logging.getLogger(__name__)

PointFn = Callable[[np.ndarray], np.ndarray]


class Part:
    """A spatial quantity that can be sampled on cells or at points."""

    def at(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def on(self, mesh: Mesh) -> np.ndarray:
        return np.asarray(self.at(mesh.centroids), dtype=float)


@dataclass(frozen=True, eq=False)
class FunctionPart(Part):
    fn: PointFn

    def at(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(points)), dtype=float)


@dataclass(frozen=True, eq=False)
class TablePart(Part):
    mesh: Mesh
    table: np.ndarray

    def at(self, points: np.ndarray) -> np.ndarray:
        return table_source(self.mesh, self.table)(np.atleast_2d(points))

    def on(self, mesh: Mesh) -> np.ndarray:
        if mesh is self.mesh:
            return np.asarray(self.table, dtype=float)
        return self.at(mesh.centroids)


@dataclass(frozen=True, eq=False)
class SumPart(Part):
    terms: Tuple[Tuple[float, Part], ...]

    def at(self, points: np.ndarray) -> np.ndarray:
        return sum(c * part.at(points) for c, part in self.terms)

    def on(self, mesh: Mesh) -> np.ndarray:
        return sum(c * part.on(mesh) for c, part in self.terms)


def _combine(a: float, p1: Optional[Part], b: float, p2: Optional[Part]) -> Optional[Part]:
    terms = []
    if p1 is not None and a != 0.0:
        terms.append((a, p1))
    if p2 is not None and b != 0.0:
        terms.append((b, p2))
    if not terms:
        return None
    return SumPart(tuple(terms))


def _intersect(r1: Optional[Region], r2: Optional[Region]) -> Optional[Region]:
    if r1 is None:
        return r2
    if r2 is None or r1 == r2:
        return r1
    if r1.kind != r2.kind:
        raise InputError("weights live on incompatible domains")
    lo = tuple(np.maximum(r1.lower, r2.lower).tolist())
    hi = tuple(np.minimum(r1.upper, r2.upper).tolist())
    return Region(r1.kind, lo, hi, r1.punctured or r2.punctured)


@dataclass(frozen=True, eq=False)
class Weight:
    density: Optional[Part] = None
    divergence_part: Optional[Part] = None
    closed_form: Optional[str] = None
    domain: Optional[Region] = None
    singular_origin: bool = False
    zero: bool = False

    def __post_init__(self):
        if self.density is None and self.divergence_part is None and not self.zero:
            raise InputError("a weight needs a density part or a divergence part")

    @classmethod
    def zeros(cls) -> "Weight":
        return cls(closed_form="zero", zero=True)

    @classmethod
    def from_density(cls, fn: PointFn, *, domain: Optional[Region] = None, name: Optional[str] = None) -> "Weight":
        return cls(density=FunctionPart(fn), domain=domain, closed_form=name)

    @classmethod
    def from_divergence(cls, fn: PointFn, *, domain: Optional[Region] = None, name: Optional[str] = None) -> "Weight":
        return cls(divergence_part=FunctionPart(fn), domain=domain, closed_form=name)

    @classmethod
    def from_tables(cls, mesh: Mesh, density: Optional[Union[np.ndarray, ScalarField]] = None,
                    gamma: Optional[Union[np.ndarray, VectorField]] = None) -> "Weight":
        dpart = gpart = None
        if density is not None:
            dens = density.cell_values if isinstance(density, ScalarField) else np.asarray(density, dtype=float)
            if dens.shape != (mesh.ncells,) or not np.all(np.isfinite(dens)):
                raise InputError("density table must hold one finite value per cell")
            dpart = TablePart(mesh, dens)
        if gamma is not None:
            g = gamma.values if isinstance(gamma, VectorField) else np.asarray(gamma, dtype=float)
            g = g.reshape(mesh.ncells, -1)
            if g.shape[1] != mesh.ncomp or not np.all(np.isfinite(g)):
                raise InputError("Gamma table must hold one finite vector per cell")
            gpart = TablePart(mesh, g)
        return cls(density=dpart, divergence_part=gpart, domain=mesh.region)

    def is_zero(self) -> bool:
        return self.zero and self.density is None and self.divergence_part is None

    def check_mesh(self, mesh: Mesh) -> None:
        if self.singular_origin:
            if mesh.kind == "radial" and mesh.inner <= 0:
                raise InputError(f"{self.closed_form or 'weight'} is singular at the origin; use an inner radius > 0")
            if mesh.kind == "tensor" and np.all(mesh.lower <= 0) and np.all(mesh.upper >= 0):
                raise InputError(f"{self.closed_form or 'weight'} is singular at the origin inside the box")
        if self.domain is not None and not self.domain.contains(mesh.region):
            raise InputError(f"mesh {mesh.mesh_id} lies outside the weight's domain")

    def density_cells(self, mesh: Mesh) -> np.ndarray:
        if self.density is None:
            return np.zeros(mesh.ncells)
        self.check_mesh(mesh)
        return np.asarray(self.density.on(mesh), dtype=float).reshape(mesh.ncells)

    def gamma_cells(self, mesh: Mesh) -> np.ndarray:
        if self.divergence_part is None:
            return np.zeros((mesh.ncells, mesh.ncomp))
        self.check_mesh(mesh)
        return np.asarray(self.divergence_part.on(mesh), dtype=float).reshape(mesh.ncells, mesh.ncomp)

    def load_vector(self, mesh: Mesh) -> np.ndarray:
        """Nodal vector s with <sigma, phi> = s . phi for nodal phi."""
        s = np.zeros(mesh.npts)
        if self.density is not None:
            s += mesh.lump.T @ (self.density_cells(mesh) * mesh.volumes)
        if self.divergence_part is not None:
            g = self.gamma_cells(mesh) * mesh.volumes[:, None]
            s -= mesh.grad_c.T @ g.reshape(-1)
        return s

    def scaled(self, c: float) -> "Weight":
        return Weight.combine(c, self, 0.0, None)

    def __add__(self, other: "Weight") -> "Weight":
        return Weight.combine(1.0, self, 1.0, other)

    def __mul__(self, c: float) -> "Weight":
        return self.scaled(float(c))

    __rmul__ = __mul__

    def __neg__(self) -> "Weight":
        return self.scaled(-1.0)

    @staticmethod
    def combine(a: float, w1: "Weight", b: float, w2: Optional["Weight"]) -> "Weight":
        d2 = w2.density if w2 is not None else None
        g2 = w2.divergence_part if w2 is not None else None
        dens = _combine(a, w1.density, b, d2)
        div = _combine(a, w1.divergence_part, b, g2)
        dom = _intersect(w1.domain, w2.domain if w2 is not None else None)
        singular = w1.singular_origin or (w2 is not None and w2.singular_origin)
        if dens is None and div is None:
            return Weight(closed_form="zero", zero=True, domain=dom)
        return Weight(dens, div, None, dom, singular)


@dataclass(frozen=True, eq=False)
class MeasureField:
    """Nonnegative per-cell density plus point atoms."""

    mesh: Mesh
    density: np.ndarray
    atoms: Tuple[Tuple[Tuple[float, ...], float], ...] = field(default=())

    def __post_init__(self):
        dens = np.asarray(self.density, dtype=float).reshape(-1)
        if dens.shape[0] != self.mesh.ncells:
            raise InputError(f"measure density has {dens.shape[0]} values for {self.mesh.ncells} cells")
        if np.any(dens < 0) or not np.all(np.isfinite(dens)):
            raise InputError("measure density must be finite and nonnegative")
        atoms = tuple((tuple(np.atleast_1d(np.asarray(pt, dtype=float)).tolist()), float(m))
                      for pt, m in self.atoms)
        if any(m < 0 for _, m in atoms):
            raise InputError("atom masses must be nonnegative")
        if self.mesh.kind == "radial" and any(pt[0] != 0.0 for pt, _ in atoms):
            raise InputError("radial measures only carry atoms at the origin")
        object.__setattr__(self, "density", dens)
        object.__setattr__(self, "atoms", atoms)

    def total_mass(self) -> float:
        return float(np.dot(self.density, self.mesh.volumes) + sum(m for _, m in self.atoms))

    def truncated(self, radius: float) -> "MeasureField":
        """mu restricted to B(0, radius)."""
        frac = ball_cell_weights(self.mesh, Ball(0.0 if self.mesh.kind == "radial" else
                                                 tuple([0.0] * self.mesh.cdim), radius)) / self.mesh.volumes
        atoms = tuple(a for a in self.atoms if np.linalg.norm(a[0]) <= radius)
        return MeasureField(self.mesh, self.density * frac, atoms)

    def scaled(self, c: float) -> "MeasureField":
        if c < 0:
            raise InputError("measures scale by nonnegative factors only")
        return MeasureField(self.mesh, self.density * c, tuple((pt, m * c) for pt, m in self.atoms))


def pair(sigma: Weight, phi: ScalarField) -> float:
    """<sigma, phi> = int f phi - int Gamma . grad(phi)."""
    mesh = phi.mesh
    if sigma.is_zero():
        return 0.0
    if sigma.divergence_part is not None:
        edge = np.abs(phi.values[mesh.boundary])
        if edge.size and edge.max() > 1e-14 * max(1.0, np.abs(phi.values).max()):
            raise InputError("test function touches the boundary while sigma has a divergence part")
    return float(np.dot(sigma.load_vector(mesh), phi.values))


def _mollify_part(part: Optional[Part], eps: float, mesh: Mesh) -> Optional[Part]:
    if part is None:
        return None
    kind = mesh.kind
    spacing = mesh.spacing if kind == "tensor" else None

    def smoothed(points: np.ndarray) -> np.ndarray:
        return convolve_points(part.at, eps, points, kind, spacing)

    return FunctionPart(smoothed)


def _source_region(sigma: Weight) -> Optional[Region]:
    regions = [sigma.domain]
    for part in (sigma.density, sigma.divergence_part):
        stack = [part]
        while stack:
            cur = stack.pop()
            if isinstance(cur, TablePart):
                regions.append(cur.mesh.region)
            elif isinstance(cur, SumPart):
                stack.extend(p for _, p in cur.terms)
    out = None
    for r in regions:
        out = _intersect(out, r)
    return out


def mollify_weight(sigma: Weight, eps: float, mesh: Mesh) -> Weight:
    """sigma_eps = phi_eps * sigma on the subdomain covered by ``mesh``."""
    if eps < 0:
        raise InputError("eps must be >= 0")
    if sigma.is_zero() or eps == 0:
        return sigma
    target = mesh.region
    if sigma.singular_origin:
        if mesh.kind == "radial" and mesh.inner - eps <= 0:
            raise InputError(f"eps={eps} reaches the singular origin from inner radius {mesh.inner}")
        if mesh.kind == "tensor":
            gap = np.maximum(np.maximum(mesh.lower, -mesh.upper), 0.0)
            if np.linalg.norm(gap) <= eps:
                raise InputError(f"eps={eps} reaches the singular origin")
    src = _source_region(sigma)
    if src is not None:
        if not src.contains(target) or target.gap_to(src) <= eps:
            raise InputError(f"eps={eps} too large for the weight's domain")
    return Weight(
        density=_mollify_part(sigma.density, eps, mesh),
        divergence_part=_mollify_part(sigma.divergence_part, eps, mesh),
        closed_form=f"{sigma.closed_form}*phi_{eps:.3g}" if sigma.closed_form else None,
        domain=target,
        singular_origin=False,
    )


def hardy_weight(params: ProblemParams, t: float, form: str = "density") -> Weight:
    """t c0 |x|^{-p}, either as a density or as div(t c0/(n-p) x |x|^{-p})."""
    assert form in {"density", "divergence"}
    if params.c0 is None:
        raise InputError(f"Hardy weight needs p < n (p={params.p}, n={params.n})")
    if not (0.0 < t <= 1.0):
        raise InputError(f"Hardy multiplier t must lie in (0, 1], got {t}")
    amp = t * params.c0
    p = params.p

    if form == "density":
        def dens(x: np.ndarray) -> np.ndarray:
            return amp * np.linalg.norm(x, axis=1) ** (-p)

        return Weight(density=FunctionPart(dens), closed_form=f"hardy({t:g})", singular_origin=True)

    coef = amp / (params.n - p)

    def gamma(x: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(x, axis=1)
        return coef * x * (r ** (-p))[:, None]

    return Weight(divergence_part=FunctionPart(gamma), closed_form=f"hardy_div({t:g})", singular_origin=True)


def smooth_bump_weight(center: Union[float, Sequence[float]], radius: float, amplitude: float,
                       degree: int = 3) -> Weight:
    """amplitude (1 - |x - center|^2/radius^2)^degree, compactly supported.

    On radial meshes ``center`` is a radius and the bump is a shell.
    """
    if radius <= 0:
        raise InputError("bump radius must be positive")
    c = np.atleast_1d(np.asarray(center, dtype=float))

    def dens(x: np.ndarray) -> np.ndarray:
        if x.shape[1] == 1:
            d = np.abs(x[:, 0] - c[0])
        else:
            d = np.linalg.norm(x - c[None, :], axis=1)
        return amplitude * np.clip(1.0 - (d / radius) ** 2, 0.0, None) ** degree

    return Weight(density=FunctionPart(dens), closed_form=f"bump({amplitude:g})")
