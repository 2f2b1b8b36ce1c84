#!/usr/bin/env python3
"""
Unit tests for formbound.decompose module.
"""
import pytest
import sys
import numpy as np
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from formbound.core import ProblemParams, ScalarField, radial_mesh
from formbound.decompose import (
    DecomposeConfig,
    ResidualCertificate,
    chain_rule_error,
    decompose_sigma,
    gradient_bound_check,
    green_solve,
    log_transform,
    origin_ball_family,
    residual_basis,
    ric_residual,
    riesz_potential,
    schro_residual,
    supercritical_degeneracy_check,
)
from formbound.errors import InputError
from formbound.operators import OperatorSpec
from formbound.solver import DiscreteSystem, SolveConfig, solve_local
from formbound.weights import MeasureField, Weight, hardy_weight


@pytest.fixture
def ball_mesh():
    return radial_mesh(0.0, 1.0, 3, 256)


class TestLogTransform:
    """Test the log substitution."""

    def test_rejects_nonpositive(self):
        """Test that u with a zero is rejected."""
        mesh = radial_mesh(0.0, 1.0, 3, 8)
        with pytest.raises(InputError):
            log_transform(ScalarField(mesh, mesh.radii))

    def test_constant_chain_rule(self):
        """Test that a constant field has zero chain-rule error."""
        mesh = radial_mesh(0.0, 1.0, 3, 8)
        u = ScalarField(mesh, np.full(mesh.npts, 3.0))
        v = log_transform(u)
        assert np.allclose(v.values, np.log(3.0))
        assert chain_rule_error(u, v) == 0.0


class TestCertificates:
    """Test weak-residual certificates."""

    def test_certificate_dict(self):
        """Test the certificate's record layout."""
        cert = ResidualCertificate("schro", "hats(3)", 1e-6, 1e-3, True)
        assert cert.to_dict() == {"equation": "schro", "basis": "hats(3)", "max_residual": 1e-6,
                                  "tolerance": 1e-3, "passed": True}

    def test_basis_description(self):
        """Test that the basis counts interior hats and three bumps."""
        mesh = radial_mesh(0.1, 1.0, 3, 32)
        basis = residual_basis(mesh, 2.0)
        assert basis.description == "hats(31)+bumps(3)"
        assert np.all(basis.bump_norms > 0)

    def test_zero_riccati(self):
        """Test that v = 0 solves the Riccati equation with sigma = 0."""
        mesh = radial_mesh(0.1, 1.0, 3, 32)
        op = OperatorSpec.p_laplacian(ProblemParams(3, 2.0))
        cert = ric_residual(ScalarField(mesh, np.zeros(mesh.npts)), Weight.zeros(), op)
        assert cert.passed
        assert cert.equation == "riccati"
        assert cert.max_residual == 0.0

    def test_schro_after_solve(self):
        """Test that a converged Hardy solve passes its residual certificate."""
        params = ProblemParams(3, 2.0)
        mesh = radial_mesh(0.05, 1.0, 3, 128, "log")
        op = OperatorSpec.p_laplacian(params)
        sigma = hardy_weight(params, 0.5)
        res = solve_local(op, sigma, mesh, SolveConfig(coercivity_restarts=1))
        cert = schro_residual(res.u, sigma, op)
        assert cert.passed
        assert cert.max_residual < 1e-6

    def test_schro_detects_wrong_field(self):
        """Test that a non-solution fails the certificate."""
        params = ProblemParams(3, 2.0)
        mesh = radial_mesh(0.05, 1.0, 3, 64)
        u = ScalarField(mesh, 1.0 + np.sin(np.pi * mesh.radii))
        cert = schro_residual(u, Weight.zeros(), OperatorSpec.p_laplacian(params))
        assert not cert.passed


class TestPotentials:
    """Test Riesz and Green potentials."""

    def test_atom_potential(self):
        """Test I_2 of a unit atom at the origin in three dimensions."""
        mesh = radial_mesh(0.0, 1.0, 3, 8)
        mu = MeasureField(mesh, np.zeros(mesh.ncells), atoms=(((0.0,), 1.0),))
        assert np.allclose(riesz_potential(mu, 2.0, [0.5, 1.0]), [2.0, 1.0])

    def test_point_on_atom(self):
        """Test that evaluating on an atom is rejected."""
        mesh = radial_mesh(0.0, 1.0, 3, 8)
        mu = MeasureField(mesh, np.zeros(mesh.ncells), atoms=(((0.0,), 1.0),))
        with pytest.raises(InputError):
            riesz_potential(mu, 2.0, [0.0])

    def test_order_range(self):
        """Test that alpha outside (0, n) is rejected."""
        mesh = radial_mesh(0.0, 1.0, 3, 8)
        mu = MeasureField(mesh, np.ones(mesh.ncells))
        with pytest.raises(InputError):
            riesz_potential(mu, 3.0, [0.5])

    def test_green_atom_three_dimensions(self):
        """Test that a unit atom at the origin has potential 1/(4 pi |x|)."""
        mu = MeasureField(radial_mesh(0.0, 1.0, 3, 8), np.zeros(8), atoms=(((0.0,), 1.0),))
        target = radial_mesh(0.1, 1.0, 3, 16)
        w = green_solve(mu, ProblemParams(3, 2.0), target)
        assert np.allclose(w.values, 1.0 / (4.0 * np.pi * target.radii))

    def test_green_atom_plane(self):
        """Test that a unit atom at the origin has potential log|x| / (2 pi) in the plane."""
        mu = MeasureField(radial_mesh(0.0, 1.0, 2, 8), np.zeros(8), atoms=(((0.0,), 1.0),))
        target = radial_mesh(0.1, 1.0, 2, 16)
        w = green_solve(mu, ProblemParams(2, 2.0), target)
        assert np.allclose(w.values, np.log(target.radii) / (2.0 * np.pi))

    @pytest.mark.parametrize("n,sign", [(3, 1.0), (2, -1.0)])
    def test_green_discrete_laplacian(self, n, sign):
        """Test that the stiffness action of the potential returns the lumped density load."""
        mesh = radial_mesh(0.0, 1.0, n, 256)
        dens = np.clip(1.0 - (mesh.centroids[:, 0] / 0.25) ** 2, 0.0, None) ** 3
        w = green_solve(MeasureField(mesh, dens), ProblemParams(n, 2.0), mesh)
        load = mesh.lump.T @ (dens * mesh.volumes)
        stiff = DiscreteSystem(OperatorSpec.p_laplacian(ProblemParams(n, 2.0)), mesh).internal(w.values)
        keep = (mesh.radii >= 0.05) & (mesh.radii <= 0.9)
        assert np.max(np.abs(stiff[keep] - sign * load[keep])) <= 2e-2 * np.max(np.abs(load))

    def test_shell_potential(self):
        """Test that a thin unit shell has a flat potential inside and 1/|x| outside."""
        mesh = radial_mesh(0.0, 2.0, 3, 64)
        dens = np.zeros(mesh.ncells)
        shell = int(np.argmin(np.abs(mesh.radii[:-1] - 1.0)))
        dens[shell] = 1.0 / mesh.volumes[shell]
        mu = MeasureField(mesh, dens)
        inside = riesz_potential(mu, 2.0, [0.1, 0.5])
        assert inside[0] == pytest.approx(inside[1], rel=1e-12)
        assert 1.0 / mesh.radii[shell + 1] <= inside[0] <= 1.0
        assert riesz_potential(mu, 2.0, [1.5, 1.9]) == pytest.approx([1.0 / 1.5, 1.0 / 1.9], rel=1e-12)

    def test_uniform_ball_potential(self, ball_mesh):
        """Test the Newtonian potential (3 - r^2)/6 of the uniform unit ball."""
        mu = MeasureField(ball_mesh, np.ones(ball_mesh.ncells))
        w = green_solve(mu, ProblemParams(3, 2.0), ball_mesh)
        assert np.allclose(w.values, (3.0 - ball_mesh.radii ** 2) / 6.0, atol=1e-3)

    def test_gradient_bound(self, ball_mesh):
        """Test |grad w| against I_1 for the uniform ball."""
        mu = MeasureField(ball_mesh, np.ones(ball_mesh.ncells))
        out = gradient_bound_check(mu, ProblemParams(3, 2.0), ball_mesh)
        assert out["c"] == pytest.approx(1.0 / (4 * np.pi))
        assert 0.0 < out["worst_ratio"] < 1.0


class TestDecompose:
    """Test sigma = div Gamma."""

    def test_zero_weight(self):
        """Test that sigma = 0 gives Gamma = 0 and a passing certificate."""
        params = ProblemParams(3, 2.0)
        mesh = radial_mesh(0.0, 1.0, 3, 64)
        cfg = DecomposeConfig(restarts=1, truncations=2)
        result = decompose_sigma(Weight.zeros(), 1.0, OperatorSpec.p_laplacian(params), mesh, cfg)
        assert result.K == pytest.approx(2.0)
        assert np.allclose(result.Gamma.values, 0.0, atol=1e-12)
        assert result.certificate.passed
        assert result.capacity_ratio == 0.0
        assert len(result.truncations) == 2
        assert result.stabilization_gap == pytest.approx(0.0, abs=1e-12)

    def test_rejects_supercritical(self):
        """Test that p >= n with sigma != 0 is rejected."""
        params = ProblemParams(3, 3.0)
        mesh = radial_mesh(0.1, 1.0, 3, 16)
        sigma = Weight.from_density(lambda x: np.ones(x.shape[0]))
        with pytest.raises(InputError, match="p >= n"):
            decompose_sigma(sigma, 1.0, OperatorSpec.p_laplacian(params), mesh)

    def test_rejects_nonpositive_c0(self):
        """Test that C0 <= 0 is rejected."""
        params = ProblemParams(3, 2.0)
        with pytest.raises(InputError):
            decompose_sigma(Weight.zeros(), 0.0, OperatorSpec.p_laplacian(params), radial_mesh(0.0, 1.0, 3, 16))

    def test_origin_balls(self):
        """Test that the origin family stays outside the inner radius."""
        balls = origin_ball_family(radial_mesh(0.2, 1.0, 3, 16))
        assert [b.radius for b in balls] == [0.5, 0.25]


class TestSupercritical:
    """Test capacity degeneracy for p >= n."""

    def test_planar_log_law(self):
        """Test that planar capacities decay like (log R)^{-1}."""
        params = ProblemParams(2, 2.0)
        meshes = [radial_mesh(0.0, R, 2, 512) for R in (2.0, 4.0, 8.0)]
        out = supercritical_degeneracy_check(params, meshes, 1.0)
        assert out["decreasing"]
        assert out["slope"] == pytest.approx(-1.0, abs=0.05)
        assert out["law"] == "(log R)^(1-p)"

    def test_needs_supercritical(self):
        """Test that p < n is rejected."""
        with pytest.raises(InputError):
            supercritical_degeneracy_check(ProblemParams(3, 2.0), [radial_mesh(0.0, 2.0, 3, 16)] * 2)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
