"""
Discrete solves of -div A(x, grad u) = sigma |u|^{p-2} u (local existence step)
and -div A(x, grad u) = f (Dirichlet oracle and Poisson step).

The nodal residual for interior hat functions phi_i is

    F_i(u) = int A(grad u) . grad(phi_i) - tau s_i |u_i|^{p-2} u_i - b_i

with s the lumped load of sigma (weights.Weight.load_vector) and b the load of
a fixed right-hand side. Nonlinear iterations are damped Newton with a Picard
(frozen-coefficient) fallback and continuation in tau from 0 to 1.
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.optimize import bisect
from scipy.sparse.linalg import spsolve

from .core import Ball, Mesh, ProblemParams, ScalarField, ball_cell_weights, ball_node_mask
from .errors import GateRefusal, InputError, NegativeSolution, NonConvergence
from .operators import OperatorSpec, flux, flux_jacobian
from .weights import Weight

logger = logging.getLogger(__name__)

BoundaryData = Union[None, float, np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass
class SolveConfig:
    max_iterations: int = 60
    tolerance: float = 1e-9
    continuation_steps: int = 1
    damping_min: float = 1.0 / 64.0
    delta_initial: float = 1e-1
    delta_final: float = 1e-8
    normalization_ball: Optional[Ball] = None
    slack_factor: float = 10.0
    harnack_balls: Tuple[Ball, ...] = ()
    coercivity_restarts: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InputError(f"solver tolerance must be > 0, got {self.tolerance}")
        if self.continuation_steps < 1:
            raise InputError("continuation steps must be >= 1")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")


@dataclass
class SolveResult:
    u: ScalarField
    iterations: int
    residual: float
    min_value: float
    harnack: List[Tuple[Ball, float]]
    normalization_scale: float
    energy_trace: List[float] = field(default_factory=list)
    converged: bool = True
    lambda_hat: Optional[float] = None

    def summary(self) -> Dict[str, float]:
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "min_value": self.min_value,
            "normalization_scale": self.normalization_scale,
            "max_harnack": max((r for _, r in self.harnack), default=float("nan")),
            "lambda_hat": float("nan") if self.lambda_hat is None else self.lambda_hat,
        }


def hat_gradient_norms(mesh: Mesh, p: float) -> np.ndarray:
    """||grad phi_i||_p for every nodal hat."""
    G = mesh.grad_q.tocoo()
    k = mesh.ncomp
    nqp = mesh.ncells * mesh.nq
    S = sparse.csr_matrix((G.data ** 2, (G.row // k, G.col)), shape=(nqp, mesh.npts))
    S.data = S.data ** (p / 2.0)
    return np.asarray(S.T @ mesh.qweights.reshape(-1)) ** (1.0 / p)


class DiscreteSystem:
    """Residual, Jacobian and energy of the nodal system on one mesh."""

    def __init__(self, op: OperatorSpec, mesh: Mesh, potential: Optional[np.ndarray] = None,
                 source: Optional[np.ndarray] = None):
        self.op = op
        self.mesh = mesh
        self.p = op.p
        self.k = mesh.ncomp
        self.w = op.weight_on(mesh).reshape(-1)
        self.qw = mesh.qweights.reshape(-1)
        self.G = mesh.grad_q
        self.potential = np.zeros(mesh.npts) if potential is None else np.asarray(potential, dtype=float)
        self.source = np.zeros(mesh.npts) if source is None else np.asarray(source, dtype=float)
        self.hat_norms = hat_gradient_norms(mesh, self.p)

    def gradients(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.G @ u).reshape(-1, self.k)

    def _pot(self, u: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
        p = self.p
        if p >= 2:
            au = np.abs(u)
            return au ** (p - 2.0) * u, (p - 1.0) * au ** (p - 2.0)
        s2 = u * u + delta * delta
        base = s2 ** ((p - 2.0) / 2.0)
        return base * u, base * (1.0 + (p - 2.0) * u * u / s2)

    def internal(self, u: np.ndarray, delta: float = 0.0) -> np.ndarray:
        a = flux(self.w, self.gradients(u), self.p, delta)
        return np.asarray(self.G.T @ (self.qw[:, None] * a).reshape(-1))

    def residual(self, u: np.ndarray, tau: float = 1.0, delta: float = 0.0) -> np.ndarray:
        pot, _ = self._pot(u, delta)
        return self.internal(u, delta) - tau * self.potential * pot - self.source

    def stiffness(self, u: np.ndarray, delta: float, secant: bool = False) -> sparse.csr_matrix:
        g = self.gradients(u)
        if secant:
            s2 = np.sum(g * g, axis=1) + delta * delta
            coef = self.w * s2 ** ((self.p - 2.0) / 2.0) * self.qw
            blocks = coef[:, None, None] * np.broadcast_to(np.eye(self.k), (len(coef), self.k, self.k))
        else:
            blocks = flux_jacobian(self.w, g, self.p, delta) * self.qw[:, None, None]
        nqp = blocks.shape[0]
        base = np.arange(nqp)[:, None, None] * self.k
        rows = np.broadcast_to(base + np.arange(self.k)[None, :, None], blocks.shape)
        cols = np.broadcast_to(base + np.arange(self.k)[None, None, :], blocks.shape)
        B = sparse.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(nqp * self.k,) * 2)
        return (self.G.T @ B @ self.G).tocsr()

    def jacobian(self, u: np.ndarray, tau: float, delta: float) -> sparse.csr_matrix:
        _, dpot = self._pot(u, delta)
        return (self.stiffness(u, delta) - sparse.diags(tau * self.potential * dpot)).tocsr()

    def energy(self, u: np.ndarray, tau: float = 1.0) -> float:
        g = self.gradients(u)
        grad_term = np.sum(self.qw * self.w * np.sum(g * g, axis=1) ** (self.p / 2.0)) / self.p
        pot_term = tau * np.dot(self.potential, np.abs(u) ** self.p) / self.p
        return float(grad_term - pot_term - np.dot(self.source, u))

    def normalized_residual(self, u: np.ndarray, free: np.ndarray, tau: float = 1.0, delta: float = 0.0) -> float:
        """max_i |F_i| / (||grad phi_i||_p ||u||_inf^{p-1}) over free nodes."""
        if not np.any(free):
            return 0.0
        F = self.residual(u, tau, delta)
        amp = max(float(np.max(np.abs(u))), 1e-300) ** (self.p - 1.0)
        return float(np.max(np.abs(F[free]) / self.hat_norms[free]) / amp)


def _solve_linear(J: sparse.csr_matrix, rhs: np.ndarray) -> Optional[np.ndarray]:
    try:
        x = spsolve(J.tocsc(), rhs)
    except (RuntimeError, ValueError):
        return None
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return x if np.all(np.isfinite(x)) else None


def _picard_step(system: DiscreteSystem, u: np.ndarray, free: np.ndarray, tau: float, delta: float) -> Optional[np.ndarray]:
    """Frozen-coefficient (Kacanov) update with the potential lagged."""
    K = system.stiffness(u, delta, secant=True)
    pot, _ = system._pot(u, delta)
    rhs = tau * system.potential * pot + system.source
    fixed = ~free
    Kff = K[free][:, free]
    b = rhs[free] - K[free][:, fixed] @ u[fixed]
    sol = _solve_linear(Kff, b)
    if sol is None:
        return None
    out = u.copy()
    out[free] = sol
    return out


def newton_iterate(system: DiscreteSystem, u0: np.ndarray, free: np.ndarray, cfg: SolveConfig,
                   taus: Sequence[float], deltas: Sequence[float]) -> Tuple[np.ndarray, int, float, List[float]]:
    """Damped Newton with Picard fallback along a continuation path.

    Returns (u, iterations, final unregularized residual, energy per accepted step).
    """
    u = np.asarray(u0, dtype=float).copy()
    total = 0
    energies: List[float] = []
    last = len(taus) - 1
    for step, (tau, delta) in enumerate(zip(taus, deltas)):
        tol = cfg.tolerance if step == last else max(cfg.tolerance, 1e-6)
        res = system.normalized_residual(u, free, tau, delta)
        it = 0
        while res > tol and it < cfg.max_iterations:
            it += 1
            F = system.residual(u, tau, delta)
            J = system.jacobian(u, tau, delta)[free][:, free]
            du = _solve_linear(J, -F[free])
            accepted = False
            if du is not None:
                alpha = 1.0
                while alpha >= cfg.damping_min:
                    trial = u.copy()
                    trial[free] += alpha * du
                    r_try = system.normalized_residual(trial, free, tau, delta)
                    if np.isfinite(r_try) and r_try < (1.0 - 1e-4 * alpha) * res:
                        u, res, accepted = trial, r_try, True
                        break
                    alpha *= 0.5
            if not accepted:
                trial = _picard_step(system, u, free, tau, delta)
                if trial is None:
                    break
                r_try = system.normalized_residual(trial, free, tau, delta)
                if not np.isfinite(r_try):
                    break
                logger.debug("picard fallback at tau=%.3g: %.3e -> %.3e", tau, res, r_try)
                u, res = trial, r_try
        total += it
        energy = system.energy(u, tau)
        if not np.isfinite(energy) or res > tol:
            raise NonConvergence(
                f"no convergence at continuation step tau={tau:.3g} after {it} iterations",
                iterations=total, residual=res,
            )
        energies.append(energy)
    final = system.normalized_residual(u, free, taus[-1], 0.0)
    polish = 0
    while final > cfg.tolerance and polish < cfg.max_iterations:
        polish += 1
        F = system.residual(u, taus[-1], 0.0)
        du = _solve_linear(system.jacobian(u, taus[-1], cfg.delta_final)[free][:, free], -F[free])
        if du is None:
            break
        trial = u.copy()
        trial[free] += du
        r_try = system.normalized_residual(trial, free, taus[-1], 0.0)
        if not r_try < final:
            break
        u, final = trial, r_try
    total += polish
    if final > cfg.tolerance:
        raise NonConvergence(f"unregularized residual {final:.3e} above tolerance", iterations=total, residual=final)
    return u, total, final, energies


def _schedule(cfg: SolveConfig, p: float, with_zero: bool) -> Tuple[List[float], List[float]]:
    K = cfg.continuation_steps
    taus = [k / K for k in range(1, K + 1)]
    if p == 2.0:
        deltas = [0.0] * K
    else:
        deltas = [cfg.delta_initial * (cfg.delta_final / cfg.delta_initial) ** (k / K) for k in range(1, K + 1)]
    if with_zero:
        taus = [0.0] + taus
        deltas = [0.0 if p == 2.0 else cfg.delta_initial] + deltas
    return taus, deltas


def _boundary_vector(mesh: Mesh, data: BoundaryData, mask: Optional[np.ndarray] = None) -> np.ndarray:
    if data is None:
        return np.ones(mesh.npts)
    if callable(data):
        vals = np.asarray(data(mesh.nodes), dtype=float).reshape(-1)
    elif np.isscalar(data):
        vals = np.full(mesh.npts, float(data))
    else:
        vals = np.asarray(data, dtype=float).reshape(-1)
    mask = mesh.boundary if mask is None else mask
    if vals.shape[0] != mesh.npts or not np.all(np.isfinite(vals[mask])):
        raise InputError("boundary data must give a finite value for every node")
    return vals


def _initial_guess(mesh: Mesh, trace: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """Harmonic extension of the fixed values."""
    u = trace.copy()
    free = ~fixed
    if not np.any(free):
        return u
    if np.ptp(trace[fixed]) == 0:
        u[free] = trace[fixed][0]
        return u
    qw = np.repeat(mesh.qweights.reshape(-1), mesh.ncomp)
    K = (mesh.grad_q.T @ sparse.diags(qw) @ mesh.grad_q).tocsr()
    sol = _solve_linear(K[free][:, free], -(K[free][:, fixed] @ trace[fixed]))
    if sol is None:
        u[free] = float(np.mean(trace[fixed]))
    else:
        u[free] = sol
    return u


def normalize_on_ball(u: np.ndarray, mesh: Mesh, ball: Ball, exponent: float) -> Tuple[np.ndarray, float]:
    """Rescale so that int_B u^exponent = 1; returns (scaled values, scale)."""
    wts = ball_cell_weights(mesh, ball)
    vals = np.abs(np.asarray(mesh.interp @ u))
    mass = float(np.dot(wts, vals ** exponent))
    if not mass > 0:
        raise InputError(f"cannot normalize: int_B u^{exponent} = {mass}")
    scale = mass ** (-1.0 / exponent)
    return u * scale, scale


def harnack_ratios(u: ScalarField, balls: Sequence[Ball]) -> List[Tuple[Ball, float]]:
    """sup/inf of u over each ball's nodes."""
    out = []
    for ball in balls:
        mask = ball_node_mask(u.mesh, ball)
        if not np.any(mask):
            raise InputError(f"ball {ball} contains no nodes")
        vals = u.values[mask]
        if np.min(vals) <= 0:
            raise InputError(f"u is not positive on {ball}")
        out.append((ball, float(vals.max() / vals.min())))
    return out


def _coercivity_lambda(op: OperatorSpec, sigma: Weight, mesh: Mesh, cfg: SolveConfig) -> float:
    from .analysis import estimate_form_bound

    report = estimate_form_bound(sigma, op, mesh, "upper", restarts=cfg.coercivity_restarts, seed=cfg.seed)
    return report.lambda_hat


def solve_local(op: OperatorSpec, sigma: Weight, mesh: Mesh, cfg: SolveConfig, *,
                certificate=None, waive_coercivity: bool = False,
                boundary: BoundaryData = None) -> SolveResult:
    """Positive solution of -div A(grad u) = sigma |u|^{p-2} u with trace 1 (or ``boundary``),
    normalized on cfg.normalization_ball when one is set."""
    load = sigma.load_vector(mesh)
    lam = None
    if not waive_coercivity:
        lam = certificate.lambda_hat if certificate is not None else _coercivity_lambda(op, sigma, mesh, cfg)
        if lam >= 1.0:
            raise GateRefusal("coercivity", lam, 1.0)
    p = op.p
    trace = _boundary_vector(mesh, boundary)
    fixed = mesh.boundary.copy()
    u0 = _initial_guess(mesh, trace, fixed)
    system = DiscreteSystem(op, mesh, potential=load)
    nonconstant = np.ptp(trace[fixed]) > 0
    taus, deltas = _schedule(cfg, p, with_zero=(nonconstant and p != 2.0))
    u, iterations, residual, energies = newton_iterate(system, u0, ~fixed, cfg, taus, deltas)

    min_value = float(u.min())
    slack = cfg.slack_factor * cfg.tolerance * float(np.max(np.abs(u)))
    if min_value < -slack:
        raise NegativeSolution(min_value, slack)
    scale = 1.0
    if cfg.normalization_ball is not None:
        u, scale = normalize_on_ball(u, mesh, cfg.normalization_ball, p * op.params.q)
    field_u = ScalarField(mesh, u)
    balls = list(cfg.harnack_balls) or ([cfg.normalization_ball] if cfg.normalization_ball else [])
    harnack = harnack_ratios(field_u, balls) if min_value > 0 and balls else []
    logger.info("local solve: %d iterations, residual %.3e, min u %.4g, scale %.6g (local existence step)",
                iterations, residual, min_value, scale)
    return SolveResult(field_u, iterations, residual, min_value, harnack, scale, energies, True, lam)


def solve_dirichlet(op: OperatorSpec, rhs: Optional[Weight], boundary: BoundaryData, mesh: Mesh,
                    cfg: SolveConfig, *, fixed: Optional[np.ndarray] = None) -> SolveResult:
    """-div A(grad u) = rhs with u prescribed on ``fixed`` nodes (default: mesh boundary)."""
    source = rhs.load_vector(mesh) if rhs is not None else None
    mask = mesh.boundary.copy() if fixed is None else np.asarray(fixed, dtype=bool)
    if mask.shape != (mesh.npts,):
        raise InputError("fixed-node mask must have one entry per node")
    vals = _boundary_vector(mesh, boundary, mask)
    u0 = _initial_guess(mesh, vals, mask)
    system = DiscreteSystem(op, mesh, source=source)
    taus, deltas = _schedule(cfg, op.p, with_zero=False)
    taus = [1.0] * len(taus)
    u, iterations, residual, energies = newton_iterate(system, u0, ~mask, cfg, taus, deltas)
    field_u = ScalarField(mesh, u)
    harnack = harnack_ratios(field_u, cfg.harnack_balls) if cfg.harnack_balls and u.min() > 0 else []
    return SolveResult(field_u, iterations, residual, float(u.min()), harnack, 1.0, energies, True)


def _exponent_map(params: ProblemParams) -> Callable[[float], float]:
    n, p = params.n, params.p
    return lambda a: a ** (p - 1.0) * (n - p - a * (p - 1.0))


def radial_exponent_roots(params: ProblemParams, t: float) -> Tuple[float, Optional[float]]:
    """(selected gamma, discarded gamma) for |x|^gamma solving the Hardy equation with multiplier t."""
    if params.c0 is None:
        raise InputError(f"radial exponent needs p < n (p={params.p}, n={params.n})")
    if not (0.0 < t <= 1.0):
        raise InputError(f"multiplier t must lie in (0, 1], got {t}")
    n, p = params.n, params.p
    target = t * params.c0
    k = _exponent_map(params)
    a_star = (n - p) / p
    if t == 1.0:
        return (p - n) / p, None
    a_sel = bisect(lambda a: k(a) - target, 0.0, a_star, xtol=1e-14, maxiter=200)
    a_max = (n - p) / (p - 1.0)
    a_dis = bisect(lambda a: k(a) - target, a_star, a_max, xtol=1e-14, maxiter=200)
    return -a_sel, -a_dis


def radial_exponent(params: ProblemParams, t: float) -> float:
    """Root gamma in [(p-n)/p, 0) of (-gamma)^{p-1}(gamma(p-1) + n - p) = t c0, branch nearer 0."""
    gamma, discarded = radial_exponent_roots(params, t)
    if discarded is not None:
        logger.info("radial exponent: selected %.12g, discarded root %.12g", gamma, discarded)
    return gamma


def dirichlet_annulus_profile(params: ProblemParams, t: float, a: float, b: float) -> Callable[[np.ndarray], np.ndarray]:
    """Closed-form radial solution with u(a) = u(b) = 1 of the linear Hardy equation on a < |x| < b.

    Combines both exponent roots, or r^gamma and r^gamma log r at the double root t = 1.
    """
    if params.p != 2.0:
        raise InputError("the two-root annulus profile exists for p = 2 only")
    if not 0.0 < a < b:
        raise InputError(f"annulus radii must satisfy 0 < a < b, got a={a}, b={b}")
    g1, g2 = radial_exponent_roots(params, t)
    if g2 is None:
        basis = [lambda r: r ** g1, lambda r: r ** g1 * np.log(r)]
    else:
        basis = [lambda r: r ** g1, lambda r: r ** g2]
    ends = np.array([a, b], dtype=float)
    coef = np.linalg.solve(np.column_stack([f(ends) for f in basis]), np.ones(2))

    def profile(r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return coef[0] * basis[0](r) + coef[1] * basis[1](r)

    return profile
