#!/usr/bin/env python3
"""
Unit tests for formbound.solver module.
Tests Dirichlet solves, the local existence solve, and radial exponents.
"""
import pytest
import sys
import numpy as np
from pathlib import Path
from types import SimpleNamespace

sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from formbound import verify_hardy_exponent
from formbound.core import Ball, ProblemParams, ScalarField, radial_mesh, tensor_mesh
from formbound.errors import GateRefusal, InputError
from formbound.operators import OperatorSpec
from formbound.solver import (
    SolveConfig,
    dirichlet_annulus_profile,
    harnack_ratios,
    normalize_on_ball,
    radial_exponent,
    radial_exponent_roots,
    solve_dirichlet,
    solve_local,
)
from formbound.weights import Weight, hardy_weight


class TestSolveConfig:
    """Test solver configuration checks."""

    def test_defaults(self):
        """Test the default iteration budget and tolerance."""
        cfg = SolveConfig()
        assert cfg.max_iterations == 60
        assert cfg.tolerance == 1e-9

    def test_rejects_bad_values(self):
        """Test that non-positive tolerance and zero steps are rejected."""
        with pytest.raises(InputError):
            SolveConfig(tolerance=0.0)
        with pytest.raises(InputError):
            SolveConfig(continuation_steps=0)


class TestSolveDirichlet:
    """Test the Dirichlet oracle."""

    @pytest.mark.parametrize("p", [2.0, 3.0])
    def test_linear_data_reproduced(self, p):
        """Test that linear boundary data gives the linear solution."""
        mesh = tensor_mesh((0.0, 0.0), (1.0, 1.0), 8)
        op = OperatorSpec.p_laplacian(ProblemParams(2, p))
        res = solve_dirichlet(op, None, lambda x: 1.0 + x[:, 0] + 2.0 * x[:, 1], mesh, SolveConfig())
        expected = 1.0 + mesh.nodes[:, 0] + 2.0 * mesh.nodes[:, 1]
        assert np.allclose(res.u.values, expected, atol=1e-9)

    def test_radial_harmonic(self):
        """Test that u = 1/r is recovered on an annulus in three dimensions."""
        mesh = radial_mesh(0.5, 1.0, 3, 256)
        op = OperatorSpec.p_laplacian(ProblemParams(3, 2.0))
        res = solve_dirichlet(op, None, lambda x: 1.0 / x[:, 0], mesh, SolveConfig())
        assert np.allclose(res.u.values, 1.0 / mesh.radii, rtol=1e-6)

    def test_fixed_mask_shape(self):
        """Test that a mask of the wrong length is rejected."""
        mesh = radial_mesh(0.5, 1.0, 3, 16)
        op = OperatorSpec.p_laplacian(ProblemParams(3, 2.0))
        with pytest.raises(InputError):
            solve_dirichlet(op, None, 1.0, mesh, SolveConfig(), fixed=np.ones(3, dtype=bool))


class TestSolveLocal:
    """Test the local existence solve."""

    def test_zero_weight_gives_constant(self):
        """Test that sigma = 0 with unit trace gives a normalized constant."""
        mesh = radial_mesh(0.0, 1.0, 3, 64)
        ball = Ball(0.0, 0.5)
        cfg = SolveConfig(normalization_ball=ball)
        res = solve_local(OperatorSpec.p_laplacian(ProblemParams(3, 2.0)), Weight.zeros(), mesh, cfg)
        volume = 4 * np.pi * 0.125 / 3
        assert np.allclose(res.u.values, volume ** -0.5)
        assert res.lambda_hat == 0.0
        assert res.harnack[0][1] == pytest.approx(1.0)

    def test_refuses_without_coercivity(self):
        """Test that a measured lambda >= 1 stops the solve."""
        mesh = radial_mesh(0.0, 1.0, 3, 16)
        op = OperatorSpec.p_laplacian(ProblemParams(3, 2.0))
        with pytest.raises(GateRefusal) as exc:
            solve_local(op, Weight.zeros(), mesh, SolveConfig(), certificate=SimpleNamespace(lambda_hat=1.5))
        assert exc.value.gate == "coercivity"
        assert exc.value.details()["measured"] == 1.5

    def test_hardy_exponent(self):
        """Test that the Hardy solve matches |x|^gamma with exact traces."""
        u, stats = verify_hardy_exponent(n=3, p=2.0, t=0.75, inner=0.05, cells=512)
        assert stats["gamma"] == pytest.approx(-0.25)
        assert stats["max_relative_error"] < 1e-3


class TestNormalization:
    """Test ball normalization and Harnack ratios."""

    def test_normalize_on_ball(self):
        """Test that the normalized field has unit mass on the ball."""
        mesh = radial_mesh(0.0, 1.0, 3, 32)
        vals, scale = normalize_on_ball(np.full(mesh.npts, 2.0), mesh, Ball(0.0, 0.5), 2.0)
        volume = 4 * np.pi * 0.125 / 3
        assert scale == pytest.approx(0.5 * volume ** -0.5)
        assert np.allclose(vals, volume ** -0.5)

    def test_normalize_zero_field(self):
        """Test that a zero field cannot be normalized."""
        mesh = radial_mesh(0.0, 1.0, 3, 16)
        with pytest.raises(InputError):
            normalize_on_ball(np.zeros(mesh.npts), mesh, Ball(0.0, 0.5), 2.0)

    def test_harnack_ratio(self):
        """Test sup/inf of u = 1 + r over a ball."""
        mesh = radial_mesh(0.0, 1.0, 3, 10)
        u = ScalarField(mesh, 1.0 + mesh.radii)
        (ball, ratio), = harnack_ratios(u, [Ball(0.0, 0.5)])
        assert ratio == pytest.approx(1.5)

    def test_harnack_needs_positive(self):
        """Test that a sign change inside the ball is rejected."""
        mesh = radial_mesh(0.0, 1.0, 3, 10)
        u = ScalarField(mesh, mesh.radii - 0.2)
        with pytest.raises(InputError):
            harnack_ratios(u, [Ball(0.0, 0.5)])


class TestRadialExponent:
    """Test the Hardy radial exponent."""

    def test_p3_n5(self):
        """Test gamma = -1/3 for p = 3, n = 5, t = 1/2."""
        assert radial_exponent(ProblemParams(5, 3.0), 0.5) == pytest.approx(-1.0 / 3.0, abs=1e-10)

    def test_p2_n3(self):
        """Test both roots for p = 2, n = 3, t = 3/4."""
        selected, discarded = radial_exponent_roots(ProblemParams(3, 2.0), 0.75)
        assert selected == pytest.approx(-0.25, abs=1e-10)
        assert discarded == pytest.approx(-0.75, abs=1e-10)

    def test_critical_multiplier(self):
        """Test the double root (p-n)/p at t = 1."""
        assert radial_exponent(ProblemParams(3, 2.0), 1.0) == pytest.approx(-0.5)

    def test_rejects_supercritical(self):
        """Test that p >= n has no radial exponent."""
        with pytest.raises(InputError):
            radial_exponent(ProblemParams(3, 3.0), 0.5)


class TestAnnulusProfile:
    """Test the closed-form trace-1 annulus solution."""

    def test_two_roots(self):
        """Test the r^{-1/4}, r^{-3/4} combination for p = 2, n = 3, t = 3/4."""
        a, b = 0.05, 1.0
        profile = dirichlet_annulus_profile(ProblemParams(3, 2.0), 0.75, a, b)
        B = (1.0 - a ** -0.25) / (a ** -0.75 - a ** -0.25)
        A = 1.0 - B
        r = np.linspace(a, b, 7)
        assert np.allclose(profile(r), A * r ** -0.25 + B * r ** -0.75)
        assert profile(np.array([a, b])) == pytest.approx([1.0, 1.0])

    def test_double_root(self):
        """Test that at t = 1 the profile is r^{-1/2} times a linear function of log r."""
        profile = dirichlet_annulus_profile(ProblemParams(3, 2.0), 1.0, 0.01, 0.5)
        r = np.geomspace(0.01, 0.5, 9)
        scaled = profile(r) * np.sqrt(r)
        assert np.allclose(np.diff(scaled, 2), 0.0, atol=1e-12)
        assert profile(np.array([0.01, 0.5])) == pytest.approx([1.0, 1.0])

    def test_matches_local_solve(self):
        """Test that the trace-1 local solve reproduces the profile."""
        params = ProblemParams(3, 2.0)
        mesh = radial_mesh(0.05, 1.0, 3, 2048, "log")
        res = solve_local(OperatorSpec.p_laplacian(params), hardy_weight(params, 0.75), mesh, SolveConfig())
        exact = dirichlet_annulus_profile(params, 0.75, 0.05, 1.0)(mesh.radii)
        assert np.max(np.abs(res.u.values - exact) / exact) < 1e-3

    def test_rejects_p_not_two(self):
        """Test that the profile is refused away from p = 2."""
        with pytest.raises(InputError):
            dirichlet_annulus_profile(ProblemParams(5, 3.0), 0.5, 0.1, 1.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
