"""
Meshes, discrete fields, quadrature, balls and cutoff families.

Two mesh kinds are supported:

* ``radial``: a 1D partition of [a, R] carrying the r^{n-1} surface factor,
  used for every radially symmetric experiment. Vector fields keep only the
  radial component.
* ``tensor``: a uniform Q1 box grid in R^d, d >= 2, with 2^d Gauss points
  per cell.

Fields are nodal (piecewise linear / multilinear); gradients, densities and
vector fields live on cells.
"""
from __future__ import annotations
import itertools
import logging
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.special import betainc, gamma as gamma_fn, roots_legendre

from .errors import InputError

logger = logging.getLogger(__name__)

MIN_CELLS = 4
MESH_KINDS = {"radial", "tensor"}
Point = Union[float, Tuple[float, ...]]


def sphere_area(n: int) -> float:
    """Surface area of the unit sphere S^{n-1} in R^n."""
    return float(2.0 * np.pi ** (n / 2.0) / gamma_fn(n / 2.0))


@dataclass(frozen=True)
class ProblemParams:
    n: int
    p: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise InputError(f"dimension n must be an integer >= 2, got {self.n}")
        if not np.isfinite(self.p) or self.p <= 1.0:
            raise InputError(f"exponent p must be > 1, got {self.p}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "p", float(self.p))

    @property
    def p_conj(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def q(self) -> float:
        return max(self.p - 1.0, 1.0)

    @property
    def p_sharp(self) -> float:
        if self.p >= 2.0:
            return (self.p - 1.0) ** (2.0 - self.p)
        return 1.0

    @property
    def c0(self) -> Optional[float]:
        """Hardy constant ((n-p)/p)^p, None when p >= n."""
        if self.p >= self.n:
            return None
        return ((self.n - self.p) / self.p) ** self.p

    @property
    def omega(self) -> float:
        return sphere_area(self.n)


@dataclass(frozen=True)
class Region:
    """Annulus [lower, upper] (radial) or box (tensor).

    A radial region with lower == 0 is a ball unless ``punctured`` is set, in
    which case the origin counts as boundary.
    """

    kind: str
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    punctured: bool = False

    def contains(self, other: "Region", margin: float = 0.0, tol: float = 1e-12) -> bool:
        if other.kind != self.kind:
            return False
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        olo, ohi = np.asarray(other.lower), np.asarray(other.upper)
        if self.kind == "radial":
            if ohi[0] + margin > hi[0] + tol:
                return False
            if lo[0] == 0.0 and not self.punctured:
                return True
            inner = olo[0] - margin
            if self.punctured and lo[0] == 0.0:
                return inner > 0.0
            return inner >= lo[0] - tol
        return bool(np.all(olo - margin >= lo - tol) and np.all(ohi + margin <= hi + tol))

    def gap_to(self, outer: "Region") -> float:
        """Distance from this region to the boundary of ``outer``."""
        if self.kind == "radial":
            gaps = [outer.upper[0] - self.upper[0]]
            if outer.lower[0] > 0.0 or outer.punctured:
                gaps.append(self.lower[0] - outer.lower[0])
            return float(min(gaps))
        lo = np.asarray(self.lower) - np.asarray(outer.lower)
        hi = np.asarray(outer.upper) - np.asarray(self.upper)
        return float(min(lo.min(), hi.min()))


@dataclass(frozen=True)
class MeshSpec:
    kind: str
    n: int
    cells: Union[int, Tuple[int, ...]]
    lower: Union[float, Tuple[float, ...]] = 0.0
    upper: Union[float, Tuple[float, ...]] = 1.0
    grading: Union[float, str, None] = None


@dataclass(frozen=True, eq=False)
class Mesh:
    kind: str
    n: int
    nodes: np.ndarray
    cells: np.ndarray
    centroids: np.ndarray
    volumes: np.ndarray
    face_areas: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    grading: float
    shape: Tuple[int, ...]
    axes: Tuple[np.ndarray, ...]
    grad_q: sparse.csr_matrix
    grad_c: sparse.csr_matrix
    interp: sparse.csr_matrix
    lump: sparse.csr_matrix
    qpoints: np.ndarray
    qweights: np.ndarray
    boundary: np.ndarray

    @property
    def npts(self) -> int:
        return self.nodes.shape[0]

    @property
    def ncells(self) -> int:
        return self.cells.shape[0]

    @property
    def nq(self) -> int:
        return self.qweights.shape[1]

    @property
    def cdim(self) -> int:
        return self.nodes.shape[1]

    @property
    def ncomp(self) -> int:
        return self.cdim

    @property
    def radii(self) -> np.ndarray:
        return self.nodes[:, 0]

    @property
    def inner(self) -> float:
        return float(self.lower[0])

    @property
    def outer(self) -> float:
        return float(self.upper[0])

    @property
    def widths(self) -> np.ndarray:
        if self.kind != "radial":
            raise InputError("cell widths are defined for radial meshes only")
        return np.diff(self.radii)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def interior(self) -> np.ndarray:
        return ~self.boundary

    @property
    def region(self) -> Region:
        return Region(self.kind, tuple(self.lower.tolist()), tuple(self.upper.tolist()))

    @property
    def mesh_id(self) -> str:
        ext = "x".join(str(s) for s in self.shape)
        lo = ",".join(f"{v:.6g}" for v in self.lower)
        hi = ",".join(f"{v:.6g}" for v in self.upper)
        return f"{self.kind}-n{self.n}-{ext}-[{lo}]-[{hi}]-g{self.grading:.6g}"

    @cached_property
    def node_volumes(self) -> np.ndarray:
        """Lumped (dual-cell) volume of each node."""
        return np.asarray(self.lump.T @ self.volumes).ravel()

    @cached_property
    def cell_diameters(self) -> np.ndarray:
        if self.kind == "radial":
            return self.widths
        return np.full(self.ncells, float(np.linalg.norm(self.spacing)))

    def domain_volume(self) -> float:
        if self.kind == "radial":
            return sphere_area(self.n) * (self.outer ** self.n - self.inner ** self.n) / self.n
        return float(np.prod(self.upper - self.lower))


def _radial_nodes(a: float, R: float, ncells: int, grading) -> Tuple[np.ndarray, float]:
    if grading is None or grading == 1 or grading == 1.0:
        return np.linspace(a, R, ncells + 1), 1.0
    if grading == "log":
        if a <= 0:
            raise InputError("log grading needs an inner radius > 0")
        nodes = np.geomspace(a, R, ncells + 1)
        return nodes, float((R / a) ** (1.0 / ncells))
    try:
        g = float(grading)
    except (TypeError, ValueError):
        raise InputError(f"grading must be a number or 'log', got {grading!r}")
    if g <= 0:
        raise InputError(f"grading must be positive, got {g}")
    w0 = (R - a) * (g - 1.0) / (g ** ncells - 1.0)
    widths = w0 * g ** np.arange(ncells)
    nodes = a + np.concatenate([[0.0], np.cumsum(widths)])
    nodes[-1] = R
    return nodes, g


def _build_radial(spec: MeshSpec) -> Mesh:
    a, R = float(np.atleast_1d(spec.lower)[0]), float(np.atleast_1d(spec.upper)[0])
    N = int(np.atleast_1d(spec.cells)[0])
    n = int(spec.n)
    if n < 2:
        raise InputError(f"radial meshes need n >= 2, got {n}")
    r, g = _radial_nodes(a, R, N, spec.grading)
    w = np.diff(r)
    if np.any(w <= 0):
        raise InputError("degenerate radial cell (non-increasing radii)")
    om = sphere_area(n)
    mid = 0.5 * (r[:-1] + r[1:])
    vol = om * (r[1:] ** n - r[:-1] ** n) / n
    inner_half = om * (mid ** n - r[:-1] ** n) / n
    cell = np.arange(N)
    rows = np.repeat(cell, 2)
    cols = np.stack([cell, cell + 1], axis=1).ravel()
    grad = sparse.csr_matrix(
        (np.stack([-1.0 / w, 1.0 / w], axis=1).ravel(), (rows, cols)), shape=(N, N + 1)
    )
    interp = sparse.csr_matrix((np.full(2 * N, 0.5), (rows, cols)), shape=(N, N + 1))
    lump = sparse.csr_matrix(
        (np.stack([inner_half / vol, 1.0 - inner_half / vol], axis=1).ravel(), (rows, cols)),
        shape=(N, N + 1),
    )
    boundary = np.zeros(N + 1, dtype=bool)
    boundary[-1] = True
    if a > 0:
        boundary[0] = True
    return Mesh(
        kind="radial",
        n=n,
        nodes=r[:, None],
        cells=np.stack([cell, cell + 1], axis=1),
        centroids=mid[:, None],
        volumes=vol,
        face_areas=om * np.stack([r[:-1], r[1:]], axis=1) ** (n - 1),
        lower=np.array([a]),
        upper=np.array([R]),
        grading=g,
        shape=(N,),
        axes=(r,),
        grad_q=grad,
        grad_c=grad,
        interp=interp,
        lump=lump,
        qpoints=mid[:, None, None],
        qweights=vol[:, None],
        boundary=boundary,
    )


def _shape_gradients(xi: np.ndarray, offsets: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Gradients of the 2^d multilinear shape functions at local points xi."""
    d = offsets.shape[1]
    vals = np.where(offsets[None, :, :] == 1, xi[:, None, :], 1.0 - xi[:, None, :])
    out = np.empty((xi.shape[0], offsets.shape[0], d))
    for k in range(d):
        others = np.prod(np.delete(vals, k, axis=2), axis=2)
        out[:, :, k] = (2.0 * offsets[:, k] - 1.0)[None, :] / h[k] * others
    return out


def _build_tensor(spec: MeshSpec) -> Mesh:
    lo = np.asarray(spec.lower, dtype=float).ravel()
    hi = np.asarray(spec.upper, dtype=float).ravel()
    d = int(spec.n)
    if d < 2:
        raise InputError(f"tensor meshes need n >= 2, got {d}")
    if lo.size == 1:
        lo = np.full(d, lo[0])
    if hi.size == 1:
        hi = np.full(d, hi[0])
    cells = np.asarray(spec.cells, dtype=int).ravel()
    if cells.size == 1:
        cells = np.full(d, cells[0])
    if lo.size != d or hi.size != d or cells.size != d:
        raise InputError("tensor mesh bounds and cell counts must have n entries")
    if np.any(hi <= lo):
        raise InputError("tensor mesh extents must be positive")
    if np.any(cells < MIN_CELLS):
        raise InputError(f"cell count too small (need >= {MIN_CELLS} per axis)")
    if spec.grading not in (None, 1, 1.0):
        raise InputError("grading applies to radial meshes only")
    shape = tuple(int(c) for c in cells)
    axes = tuple(np.linspace(lo[k], hi[k], shape[k] + 1) for k in range(d))
    node_shape = tuple(s + 1 for s in shape)
    grids = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    ncells = int(np.prod(shape))
    cell_idx = np.stack(np.unravel_index(np.arange(ncells), shape), axis=1)
    offsets = np.array(list(itertools.product((0, 1), repeat=d)))
    corner = cell_idx[:, None, :] + offsets[None, :, :]
    conn = np.ravel_multi_index(tuple(corner[..., k] for k in range(d)), node_shape)
    h = (hi - lo) / cells
    centroids = lo + (cell_idx + 0.5) * h
    vol = np.full(ncells, float(np.prod(h)))
    na = offsets.shape[0]

    g1 = np.array([(1.0 - 1.0 / np.sqrt(3.0)) / 2.0, (1.0 + 1.0 / np.sqrt(3.0)) / 2.0])
    xi_q = np.array(list(itertools.product(g1, repeat=d)))
    nq = xi_q.shape[0]
    Dq = _shape_gradients(xi_q, offsets, h)
    rows = ((np.arange(ncells)[:, None, None, None] * nq + np.arange(nq)[None, :, None, None]) * d
            + np.arange(d)[None, None, None, :])
    rows = np.broadcast_to(rows, (ncells, nq, na, d))
    cols = np.broadcast_to(conn[:, None, :, None], (ncells, nq, na, d))
    data = np.broadcast_to(Dq[None], (ncells, nq, na, d))
    grad_q = sparse.csr_matrix(
        (data.ravel(), (rows.ravel(), cols.ravel())), shape=(ncells * nq * d, nodes.shape[0])
    )
    Dc = _shape_gradients(np.full((1, d), 0.5), offsets, h)[0]
    rows_c = (np.arange(ncells)[:, None, None] * d + np.arange(d)[None, None, :])
    rows_c = np.broadcast_to(rows_c, (ncells, na, d))
    cols_c = np.broadcast_to(conn[:, :, None], (ncells, na, d))
    grad_c = sparse.csr_matrix(
        (np.broadcast_to(Dc[None], (ncells, na, d)).ravel(), (rows_c.ravel(), cols_c.ravel())),
        shape=(ncells * d, nodes.shape[0]),
    )
    avg = sparse.csr_matrix(
        (np.full(ncells * na, 1.0 / na), (np.repeat(np.arange(ncells), na), conn.ravel())),
        shape=(ncells, nodes.shape[0]),
    )
    qpoints = lo + (cell_idx[:, None, :] + xi_q[None, :, :]) * h
    boundary = np.zeros(nodes.shape[0], dtype=bool)
    for k in range(d):
        boundary |= np.isclose(nodes[:, k], lo[k]) | np.isclose(nodes[:, k], hi[k])
    face = np.tile(vol[:1] / h, (ncells, 1))
    return Mesh(
        kind="tensor",
        n=d,
        nodes=nodes,
        cells=conn,
        centroids=centroids,
        volumes=vol,
        face_areas=face,
        lower=lo,
        upper=hi,
        grading=1.0,
        shape=shape,
        axes=axes,
        grad_q=grad_q,
        grad_c=grad_c,
        interp=avg,
        lump=avg,
        qpoints=qpoints,
        qweights=np.tile(vol[:, None] / nq, (1, nq)),
        boundary=boundary,
    )


def build_mesh(spec: Union[MeshSpec, Dict]) -> Mesh:
    """Build a radial or tensor mesh from a description.

    Raises InputError for non-positive extents or fewer than MIN_CELLS cells.
    """
    if isinstance(spec, dict):
        spec = MeshSpec(**spec)
    if spec.kind not in MESH_KINDS:
        raise InputError(f"unknown mesh kind {spec.kind!r}")
    if spec.kind == "radial":
        a = float(np.atleast_1d(spec.lower)[0])
        R = float(np.atleast_1d(spec.upper)[0])
        if a < 0 or R <= 0 or R <= a:
            raise InputError(f"radial extent [{a}, {R}] must satisfy 0 <= a < R")
        if int(np.atleast_1d(spec.cells)[0]) < MIN_CELLS:
            raise InputError(f"cell count too small (need >= {MIN_CELLS})")
        mesh = _build_radial(spec)
    else:
        mesh = _build_tensor(spec)
    if np.any(mesh.volumes <= 0):
        raise InputError("mesh has non-positive cell volumes")
    total = mesh.volumes.sum()
    expect = mesh.domain_volume()
    if abs(total - expect) > 1e-10 * expect:
        raise InputError(f"cell volumes sum to {total}, expected {expect}")
    logger.debug("built mesh %s", mesh.mesh_id)
    return mesh


def radial_mesh(a: float, R: float, n: int, cells: int, grading=None) -> Mesh:
    return build_mesh(MeshSpec(kind="radial", n=n, cells=cells, lower=a, upper=R, grading=grading))


def tensor_mesh(lower: Sequence[float], upper: Sequence[float], cells: Union[int, Sequence[int]]) -> Mesh:
    lower = tuple(float(v) for v in lower)
    return build_mesh(MeshSpec(kind="tensor", n=len(lower), cells=cells, lower=lower, upper=tuple(upper)))


@dataclass(frozen=True, eq=False)
class ScalarField:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if vals.shape[0] != self.mesh.npts:
            raise InputError(f"field has {vals.shape[0]} values for {self.mesh.npts} nodes")
        if not np.all(np.isfinite(vals)):
            raise InputError("field values must be finite")
        object.__setattr__(self, "values", vals)

    @cached_property
    def grad(self) -> "VectorField":
        return gradient(self)

    @cached_property
    def cell_values(self) -> np.ndarray:
        return np.asarray(self.mesh.interp @ self.values)

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.mesh, values)

    @classmethod
    def from_function(cls, mesh: Mesh, fn: Callable[[np.ndarray], np.ndarray]) -> "ScalarField":
        return cls(mesh, np.asarray(fn(mesh.nodes), dtype=float).reshape(-1))


@dataclass(frozen=True, eq=False)
class VectorField:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape != (self.mesh.ncells, self.mesh.ncomp):
            raise InputError(
                f"vector field shape {vals.shape} != ({self.mesh.ncells}, {self.mesh.ncomp})"
            )
        if not np.all(np.isfinite(vals)):
            raise InputError("vector field values must be finite")
        object.__setattr__(self, "values", vals)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=1)


def gradient(field: ScalarField) -> VectorField:
    mesh = field.mesh
    g = np.asarray(mesh.grad_c @ field.values).reshape(mesh.ncells, mesh.ncomp)
    return VectorField(mesh, g)


def qp_gradient(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Gradient at quadrature points, shape (ncells, nq, ncomp)."""
    return np.asarray(mesh.grad_q @ values).reshape(mesh.ncells, mesh.nq, mesh.ncomp)


def integrate(density: np.ndarray, mesh: Mesh) -> float:
    dens = np.asarray(density, dtype=float).reshape(-1)
    if dens.shape[0] != mesh.ncells:
        raise InputError(f"density length {dens.shape[0]} != {mesh.ncells} cells")
    if not np.all(np.isfinite(dens)):
        raise InputError("density must be finite")
    return float(np.dot(dens, mesh.volumes))


def integrate_q(values: np.ndarray, mesh: Mesh) -> float:
    """Quadrature-point integral of an (ncells, nq) array."""
    return float(np.sum(np.asarray(values).reshape(mesh.ncells, mesh.nq) * mesh.qweights))


def cell_values(u: Union[ScalarField, np.ndarray], mesh: Mesh) -> np.ndarray:
    """Per-cell values of a nodal field, or a per-cell array passed through."""
    if isinstance(u, ScalarField):
        return u.cell_values
    arr = np.asarray(u, dtype=float).reshape(-1)
    if arr.shape[0] == mesh.ncells:
        return arr
    if arr.shape[0] == mesh.npts:
        return np.asarray(mesh.interp @ arr)
    raise InputError(f"array of length {arr.shape[0]} matches neither cells nor nodes")


# -- balls -----------------------------------------------------------------

@dataclass(frozen=True)
class Ball:
    """B(center, radius). On radial meshes ``center`` is the distance |x0|."""

    center: Point
    radius: float

    def scaled(self, k: float) -> "Ball":
        return Ball(self.center, self.radius * k)

    def center_array(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.center, dtype=float))


def _center_distance(mesh: Mesh, center: Point, points: np.ndarray) -> np.ndarray:
    c = np.atleast_1d(np.asarray(center, dtype=float))
    if mesh.kind == "radial":
        return np.abs(points[:, 0] - c[0])
    if c.size != mesh.cdim:
        raise InputError(f"center has {c.size} coordinates, mesh has {mesh.cdim}")
    return np.linalg.norm(points - c[None, :], axis=1)


def ball_inside(mesh: Mesh, ball: Ball, tol: float = 1e-12) -> bool:
    c = ball.center_array()
    rho = float(ball.radius)
    if rho <= 0:
        return False
    if mesh.kind == "radial":
        if c[0] + rho > mesh.outer + tol:
            return False
        if c[0] == 0.0:
            return True
        return c[0] - rho >= mesh.inner - tol
    return bool(np.all(c - rho >= mesh.lower - tol) and np.all(c + rho <= mesh.upper + tol))


def sphere_cap_fraction(s: np.ndarray, c: float, rho: float, n: int) -> np.ndarray:
    """Fraction of the sphere |y| = s lying inside B(x0, rho) with |x0| = c > 0."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = (s ** 2 + c ** 2 - rho ** 2) / (2.0 * s * c)
    mu = np.where(np.isfinite(mu), mu, 2.0)
    mu_c = np.clip(mu, -1.0, 1.0)
    half = 0.5 * betainc((n - 1) / 2.0, 0.5, 1.0 - mu_c ** 2)
    frac = np.where(mu_c >= 0, half, 1.0 - half)
    frac = np.where(mu >= 1.0, 0.0, frac)
    return np.where(mu <= -1.0, 1.0, frac)


def ball_cell_weights(mesh: Mesh, ball: Ball) -> np.ndarray:
    """Volume of each cell lying inside the ball."""
    rho = float(ball.radius)
    if mesh.kind == "radial":
        c = float(ball.center_array()[0])
        r = mesh.radii
        if c == 0.0:
            n = mesh.n
            top = np.minimum(r[1:], rho)
            frac = np.clip((top ** n - r[:-1] ** n) / (r[1:] ** n - r[:-1] ** n), 0.0, 1.0)
            return frac * mesh.volumes
        return sphere_cap_fraction(mesh.centroids[:, 0], c, rho, mesh.n) * mesh.volumes
    inside = _center_distance(mesh, ball.center, mesh.centroids) < rho
    return np.where(inside, mesh.volumes, 0.0)


def ball_mean(values: np.ndarray, mesh: Mesh, ball: Ball) -> float:
    wts = ball_cell_weights(mesh, ball)
    tot = wts.sum()
    if tot <= 0:
        raise InputError(f"ball {ball} contains no cells")
    return float(np.dot(wts, values) / tot)


def ball_node_mask(mesh: Mesh, ball: Ball) -> np.ndarray:
    return _center_distance(mesh, ball.center, mesh.nodes) <= ball.radius + 1e-12


def ball_lattice(mesh: Mesh, enlargement: float = 2.0, levels: int = 4,
                 centers_per_axis: int = 5) -> List[Ball]:
    """Dyadic balls B(x, r) whose enlargement B(x, k r) fits inside the mesh."""
    balls: List[Ball] = []
    k = float(enlargement)
    if mesh.kind == "radial":
        span = mesh.outer - mesh.inner
        for j in range(levels):
            r = span / (2.0 * k) * 2.0 ** (-j)
            if r < 2.0 * mesh.widths.max():
                break
            for c in np.linspace(mesh.inner + k * r, mesh.outer - k * r, centers_per_axis):
                if c > 0:
                    balls.append(Ball(float(c), float(r)))
            if mesh.inner == 0.0:
                balls.append(Ball(0.0, float(mesh.outer / k * 2.0 ** (-j))))
    else:
        span = float(np.min(mesh.upper - mesh.lower))
        hmax = float(mesh.spacing.max())
        for j in range(levels):
            r = span / (2.0 * k) * 2.0 ** (-j)
            if r < 2.0 * hmax:
                break
            axes = [np.linspace(mesh.lower[i] + k * r, mesh.upper[i] - k * r, centers_per_axis)
                    for i in range(mesh.cdim)]
            for c in itertools.product(*axes):
                balls.append(Ball(tuple(float(v) for v in c), float(r)))
    return [b for b in balls if ball_inside(mesh, b.scaled(k))]


# -- cutoffs ---------------------------------------------------------------

@dataclass(frozen=True)
class CutoffFamily:
    """Incomplete-beta ramp cutoff: 1 on B(center, r), 0 outside B(center, R).

    The ramp derivative is proportional to (s(1-s))^((degree-1)/2); odd degrees give
    polynomial ramps.

    On radial meshes the cutoff is a shell, h = ramp(| |x| - center |); with
    center 0 this is the ball cutoff.
    """

    center: Point
    r: float
    R: float
    degree: int = 1

    def ramp(self, s: np.ndarray) -> np.ndarray:
        k = (self.degree + 1) / 2.0
        return betainc(k, k, np.clip(s, 0.0, 1.0))


def make_cutoff(family: CutoffFamily, mesh: Mesh) -> ScalarField:
    if not family.R > family.r:
        raise InputError(f"cutoff needs R > r, got r={family.r}, R={family.R}")
    if family.r < 0:
        raise InputError("cutoff inner radius must be >= 0")
    if family.degree < 1:
        raise InputError(f"cutoff profile degree must be >= 1, got {family.degree}")
    if not ball_inside(mesh, Ball(family.center, family.R)):
        raise InputError(f"cutoff ball B({family.center}, {family.R}) exits the mesh")
    dist = _center_distance(mesh, family.center, mesh.nodes)
    h = family.ramp((family.R - dist) / (family.R - family.r))
    return ScalarField(mesh, h)


def shell_cutoff(mesh: Mesh, r0: float, r1: float, r2: float, r3: float, degree: int = 3) -> ScalarField:
    """Radial bump: 0 below r0, ramps to 1 on [r1, r2], 0 above r3."""
    if mesh.kind != "radial":
        raise InputError("shell cutoffs need a radial mesh")
    if not (r0 < r1 <= r2 < r3):
        raise InputError("shell cutoff radii must satisfy r0 < r1 <= r2 < r3")
    if r0 < mesh.inner or r3 > mesh.outer:
        raise InputError("shell cutoff exits the mesh")
    c = 0.5 * (r1 + r2)
    fam = CutoffFamily(c, 0.5 * (r2 - r1), 0.5 * (r3 - r0), degree)
    r = mesh.radii
    s_in = (r - r0) / (r1 - r0)
    s_out = (r3 - r) / (r3 - r2)
    return ScalarField(mesh, np.minimum(fam.ramp(s_in), fam.ramp(s_out)))


# -- interpolation and mollification ---------------------------------------

def restrict_field(field: ScalarField, target: Mesh) -> ScalarField:
    """Interpolate a nodal field onto a mesh lying inside its own."""
    src = field.mesh
    if src.kind != target.kind or src.cdim != target.cdim:
        raise InputError("incompatible meshes for restriction")
    if not src.region.contains(target.region):
        raise InputError("target mesh is not inside the source mesh")
    if src.kind == "radial":
        return ScalarField(target, np.interp(target.radii, src.radii, field.values))
    node_shape = tuple(len(ax) for ax in src.axes)
    interp = RegularGridInterpolator(src.axes, field.values.reshape(node_shape))
    pts = np.clip(target.nodes, src.lower, src.upper)
    return ScalarField(target, interp(pts))


def mollifier_weights_1d(eps: float, panels: int = 16, order: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre offsets and weights for the 1D kernel (1-(t/eps)^2)^3."""
    t, w = roots_legendre(order)
    edges = np.linspace(-1.0, 1.0, panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    wts = (half[:, None] * w[None, :]).ravel() * (1.0 - nodes ** 2) ** 3
    return eps * nodes, wts / wts.sum()


def lattice_offsets(spacing: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Lattice offsets inside B(0, eps) and their normalized kernel weights."""
    h = np.asarray(spacing, dtype=float)
    reach = np.floor(eps / h).astype(int)
    ranges = [np.arange(-m, m + 1) * h[i] for i, m in enumerate(reach)]
    offs = np.array(list(itertools.product(*ranges)))
    rad = np.linalg.norm(offs, axis=1) / eps
    kern = np.clip(1.0 - rad ** 2, 0.0, None) ** 3
    keep = kern > 0
    return offs[keep], kern[keep] / kern[keep].sum()


def convolve_points(source: Callable[[np.ndarray], np.ndarray], eps: float, points: np.ndarray,
                    kind: str, spacing: Optional[np.ndarray] = None) -> np.ndarray:
    """Convolve a pointwise source with the radial kernel of radius eps at ``points``.

    ``source`` maps points of shape (k, cdim) to values of shape (k,) or (k, m).
    Radial points are radii and use a 1D convolution in r; tensor points use a
    normalized lattice convolution on ``spacing``.
    """
    points = np.asarray(points, dtype=float)
    if eps <= 0:
        return np.asarray(source(points), dtype=float)
    if kind == "radial":
        offs, wts = mollifier_weights_1d(eps)
        pts = (points[:, 0][:, None] - offs[None, :]).reshape(-1, 1)
    else:
        offs, wts = lattice_offsets(spacing, eps)
        pts = (points[:, None, :] - offs[None, :, :]).reshape(-1, points.shape[1])
    vals = np.asarray(source(pts), dtype=float)
    vals = vals.reshape(points.shape[0], len(wts), *vals.shape[1:])
    return np.tensordot(wts, vals, axes=([0], [1]))


def mollify_cells(source: Callable[[np.ndarray], np.ndarray], eps: float, mesh: Mesh) -> np.ndarray:
    """Mollified source at the mesh's cell centroids."""
    spacing = mesh.spacing if mesh.kind == "tensor" else None
    return convolve_points(source, eps, mesh.centroids, mesh.kind, spacing)


def table_source(mesh: Mesh, table: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Pointwise lookup of per-cell data: linear in r (radial), cellwise (tensor)."""
    data = np.asarray(table, dtype=float)
    if data.shape[0] != mesh.ncells:
        raise InputError(f"table has {data.shape[0]} rows for {mesh.ncells} cells")

    if mesh.kind == "radial":
        xc = mesh.centroids[:, 0]

        def lookup(pts: np.ndarray) -> np.ndarray:
            r = pts[:, 0]
            if data.ndim == 1:
                return np.interp(r, xc, data)
            return np.stack([np.interp(r, xc, data[:, j]) for j in range(data.shape[1])], axis=1)

        return lookup

    h = mesh.spacing
    shape = np.array(mesh.shape)

    def lookup_cells(pts: np.ndarray) -> np.ndarray:
        idx = np.floor((pts - mesh.lower) / h).astype(int)
        idx = np.clip(idx, 0, shape - 1)
        flat = np.ravel_multi_index(tuple(idx[:, k] for k in range(mesh.cdim)), mesh.shape)
        return data[flat]

    return lookup_cells


# -- CSV frames ------------------------------------------------------------

def field_frame(field: Union[ScalarField, VectorField]) -> pd.DataFrame:
    mesh = field.mesh
    if isinstance(field, ScalarField):
        df = pd.DataFrame({"index": np.arange(mesh.npts)})
        coords = mesh.nodes
        vals = {"value": field.values}
    else:
        df = pd.DataFrame({"cell": np.arange(mesh.ncells)})
        coords = mesh.centroids
        vals = {f"value{j}": field.values[:, j] for j in range(field.values.shape[1])}
    for k in range(coords.shape[1]):
        df[f"x{k}"] = coords[:, k]
    for name, col in vals.items():
        df[name] = col
    return df


def field_from_frame(df: pd.DataFrame, mesh: Mesh) -> Union[ScalarField, VectorField]:
    coords = df[[f"x{k}" for k in range(mesh.cdim)]].to_numpy(dtype=float)
    if "index" in df.columns:
        if coords.shape[0] != mesh.npts or not np.allclose(coords, mesh.nodes, rtol=1e-12, atol=1e-12):
            raise InputError("field CSV nodes do not match the mesh")
        return ScalarField(mesh, df["value"].to_numpy(dtype=float))
    if coords.shape[0] != mesh.ncells or not np.allclose(coords, mesh.centroids, rtol=1e-12, atol=1e-12):
        raise InputError("field CSV cells do not match the mesh")
    cols = sorted(c for c in df.columns if c.startswith("value"))
    return VectorField(mesh, df[cols].to_numpy(dtype=float))


def write_field_csv(field: Union[ScalarField, VectorField], path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    field_frame(field).to_csv(path, index=False, float_format="%.17g")
    return path


def read_field_csv(path: str, mesh: Mesh) -> Union[ScalarField, VectorField]:
    if not os.path.exists(path):
        raise InputError(f"field file not found: {path}", path=path)
    return field_from_frame(pd.read_csv(path), mesh)


def iter_cutoffs(mesh: Mesh, center: Point, radii: Iterable[Tuple[float, float]], degree: int = 1):
    for r, R in radii:
        fam = CutoffFamily(center, r, R, degree)
        yield fam, make_cutoff(fam, mesh)
