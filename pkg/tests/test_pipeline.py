#!/usr/bin/env python3
"""
Unit tests for formbound.pipeline module.
Tests the exhaustion schedule, the energy and chain diagnostics, and a full run.
"""
import pytest
import sys
import numpy as np
import pandas as pd
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from formbound.core import Ball, CutoffFamily, ProblemParams, ScalarField, radial_mesh, tensor_mesh
from formbound.errors import GateRefusal, InputError
from formbound.operators import OperatorSpec
from formbound.pipeline import (
    ExhaustionSchedule,
    PipelineConfig,
    caccioppoli_checks,
    convergence_in_measure,
    energy_stability,
    harnack_chain,
    higher_integrability,
    interpolation_identity,
    lambda_s,
    level_energies,
    run_pipeline,
)
from formbound.weights import Weight


@pytest.fixture
def schedule():
    return ExhaustionSchedule.annuli((0.1, 0.05), (0.9, 0.95), 3, 64, Ball(0.5, 0.05))


@pytest.fixture
def zero_trace(schedule):
    op = OperatorSpec.p_laplacian(ProblemParams(3, 2.0))
    return run_pipeline(op, Weight.zeros(), schedule, PipelineConfig(restarts=1))


class TestExhaustionSchedule:
    """Test nested domain schedules."""

    def test_default_eps(self, schedule):
        """Test that eps stays below half the gap between levels."""
        assert schedule.levels == 2
        assert schedule.eps == pytest.approx((0.025, 0.025))

    def test_not_nested(self):
        """Test that levels sharing a boundary are rejected."""
        with pytest.raises(InputError, match="compactly"):
            ExhaustionSchedule.annuli((0.1, 0.05), (0.9, 0.9), 3, 32, Ball(0.5, 0.05))

    def test_ball_too_large(self):
        """Test that 8B must fit inside the first level."""
        with pytest.raises(InputError, match="8B"):
            ExhaustionSchedule.annuli((0.1,), (0.9,), 3, 32, Ball(0.5, 0.1))

    def test_eps_length(self):
        """Test that explicit eps needs one value per level."""
        mesh = radial_mesh(0.1, 0.9, 3, 32)
        with pytest.raises(InputError):
            ExhaustionSchedule((mesh,), Ball(0.5, 0.05), (0.1, 0.1))

    def test_single_level(self):
        """Test that a single level carries no mollification."""
        mesh = radial_mesh(0.0, 1.0, 3, 32)
        sched = ExhaustionSchedule.single(mesh, Ball(0.0, 0.1))
        assert sched.eps == (0.0,)

    def test_boxes(self):
        """Test nested boxes around a common center."""
        sched = ExhaustionSchedule.boxes((0.4, 0.45), (0.5, 0.5), 16, Ball((0.5, 0.5), 0.04))
        assert sched.levels == 2
        assert sched.meshes[0].kind == "tensor"
        assert sched.eps[0] == pytest.approx(0.025)

    def test_cutoffs(self, schedule):
        """Test the two cutoff families around the normalization ball."""
        fams = schedule.cutoffs()
        assert [(f.r, f.R) for f in fams] == [(0.05, 0.1), (0.1, 0.2)]


class TestLambdaS:
    """Test the higher-integrability threshold."""

    def test_values(self):
        """Test lambda(4) = 3/4 for p = 2 and lambda(6) = 1/2 for p = 3."""
        assert lambda_s(4.0, ProblemParams(4, 2.0)) == pytest.approx(0.75)
        assert lambda_s(6.0, ProblemParams(5, 3.0)) == pytest.approx(0.5)

    def test_limit_at_p(self):
        """Test that lambda(s) tends to 1 as s decreases to p."""
        assert lambda_s(2.0 + 1e-9, ProblemParams(3, 2.0)) == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_strictly_decreasing(self, p):
        """Test that lambda(s) decreases on a grid above p."""
        grid = np.linspace(p * 1.01, p * 10.0, 100)
        values = np.array([lambda_s(s, ProblemParams(12, p)) for s in grid])
        assert np.all(np.diff(values) < 0)

    def test_needs_s_above_p(self):
        """Test that s <= p is rejected."""
        with pytest.raises(InputError):
            lambda_s(2.0, ProblemParams(3, 2.0))


class TestCaccioppoli:
    """Test the cutoff energy ratios."""

    def test_constant_field(self):
        """Test that a constant field has zero ratios."""
        mesh = radial_mesh(0.0, 1.0, 3, 64)
        u = ScalarField(mesh, np.full(mesh.npts, 2.0))
        rep = caccioppoli_checks(u, None, OperatorSpec.p_laplacian(ProblemParams(3, 2.0)),
                                 [CutoffFamily(0.0, 0.25, 0.5)], ProblemParams(3, 2.0))
        row = rep.rows.iloc[0]
        assert row["I1"] == 0.0
        assert row["I2"] > 0.0
        assert row["R1"] == 0.0 and row["R2"] == 0.0 and row["R3"] == 0.0
        assert rep.ok()

    def test_needs_positive(self):
        """Test that u <= 0 on the cutoff support is rejected."""
        mesh = radial_mesh(0.0, 1.0, 3, 64)
        u = ScalarField(mesh, mesh.radii - 0.1)
        with pytest.raises(InputError):
            caccioppoli_checks(u, None, OperatorSpec.p_laplacian(ProblemParams(3, 2.0)),
                               [CutoffFamily(0.0, 0.25, 0.5)], ProblemParams(3, 2.0))


class TestConvergenceInMeasure:
    """Test the gradient convergence fractions."""

    def test_fractions(self):
        """Test fractions for gradients that differ by exactly one."""
        mesh = radial_mesh(0.1, 1.0, 3, 16)
        u1 = ScalarField(mesh, mesh.radii)
        u2 = ScalarField(mesh, 2.0 * mesh.radii)
        df = convergence_in_measure([u1, u2], (0.5, 2.0))
        assert df["fraction"].tolist() == pytest.approx([1.0, 0.0])

    def test_needs_two_fields(self):
        """Test that a single field is rejected."""
        mesh = radial_mesh(0.1, 1.0, 3, 16)
        with pytest.raises(InputError):
            convergence_in_measure([ScalarField(mesh, mesh.radii)])

    def test_same_mesh(self):
        """Test that fields on different meshes are rejected."""
        a = radial_mesh(0.1, 1.0, 3, 16)
        b = radial_mesh(0.1, 1.0, 3, 32)
        with pytest.raises(InputError):
            convergence_in_measure([ScalarField(a, a.radii), ScalarField(b, b.radii)])


class TestChainsAndIdentities:
    """Test the Harnack chain, the interpolation inequality and the ladder."""

    def test_constant_chain(self):
        """Test that a constant field has chain ratios of 1."""
        mesh = tensor_mesh((0.0, 0.0), (1.0, 1.0), 32)
        chain = harnack_chain(np.ones(mesh.ncells), mesh, Ball((0.3, 0.3), 0.1), Ball((0.7, 0.7), 0.1))
        assert chain["product"] == pytest.approx(1.0)
        assert chain["max"] == pytest.approx(1.0)
        assert chain["doubled"] == pytest.approx(1.0)
        assert chain["steps"] == 4

    def test_chain_steps(self):
        """Test that a chain needs at least one step."""
        mesh = tensor_mesh((0.0, 0.0), (1.0, 1.0), 8)
        with pytest.raises(InputError):
            harnack_chain(np.ones(mesh.ncells), mesh, Ball((0.3, 0.3), 0.1), Ball((0.7, 0.7), 0.1), steps=0)

    def test_interpolation_holds(self):
        """Test the splitting inequality for u = 1 + r with p = 3/2."""
        params = ProblemParams(3, 1.5)
        mesh = radial_mesh(0.0, 1.0, 3, 64)
        out = interpolation_identity(ScalarField(mesh, 1.0 + mesh.radii), mesh, params)
        assert out["holds"]
        assert out["lhs"] <= out["rhs"]

    def test_interpolation_range(self):
        """Test that p >= 2 is rejected."""
        mesh = radial_mesh(0.0, 1.0, 3, 16)
        with pytest.raises(InputError):
            interpolation_identity(ScalarField(mesh, np.ones(mesh.npts)), mesh, ProblemParams(3, 2.0))

    def test_ladder(self):
        """Test the ladder 8, 4, 2 with one step above p for n = 4, p = 2."""
        params = ProblemParams(4, 2.0)
        mesh = radial_mesh(0.1, 1.0, 4, 64)
        u = ScalarField(mesh, np.ones(mesh.npts))
        out = higher_integrability(u, 8.0, params, 0.5, Ball(0.5, 0.1))
        assert out["ladder"] == pytest.approx([8.0, 4.0, 2.0])
        assert out["N"] == 1
        assert len(out["table"]) == 2
        assert out["constants"] == pytest.approx([1.0])

    def test_ladder_gate(self):
        """Test that lambda above lambda(s_1) is refused."""
        params = ProblemParams(4, 2.0)
        mesh = radial_mesh(0.1, 1.0, 4, 64)
        u = ScalarField(mesh, np.ones(mesh.npts))
        with pytest.raises(GateRefusal) as exc:
            higher_integrability(u, 8.0, params, 0.8, Ball(0.5, 0.1))
        assert exc.value.limit == pytest.approx(0.75)

    def test_ladder_preconditions(self):
        """Test that q <= p and p >= n are rejected."""
        mesh = radial_mesh(0.1, 1.0, 3, 32)
        u = ScalarField(mesh, np.ones(mesh.npts))
        with pytest.raises(InputError):
            higher_integrability(u, 2.0, ProblemParams(3, 2.0), 0.1, Ball(0.5, 0.1))
        with pytest.raises(InputError):
            higher_integrability(u, 8.0, ProblemParams(3, 3.0), 0.1, Ball(0.5, 0.1))


class TestRunPipeline:
    """Test the full construction on a zero potential."""

    def test_constant_solutions(self, zero_trace):
        """Test that every level solves to a constant with trivial diagnostics."""
        assert len(zero_trace.levels) == 2
        assert np.ptp(zero_trace.u.values) == pytest.approx(0.0, abs=1e-12)
        assert zero_trace.lambda_hat == 0.0
        rows = zero_trace.energies.rows
        assert (rows[["R1", "R2", "R3"]] == 0.0).all().all()
        assert set(rows["level"]) == {1, 2}

    def test_diagnostics(self, zero_trace):
        """Test doubling, chain and convergence records."""
        assert all(d.worst == pytest.approx(1.0) for d in zero_trace.doubling)
        assert all(h["max"] == pytest.approx(1.0) for h in zero_trace.harnack)
        assert (zero_trace.convergence["fraction"] == 0.0).all()
        assert len(zero_trace.convergence) == 3

    def test_certificates(self, zero_trace):
        """Test that both residual certificates pass."""
        assert set(zero_trace.certificates) == {"schro", "riccati"}
        assert all(c.passed for c in zero_trace.certificates.values())

    def test_decisions(self, zero_trace):
        """Test that every gate decision proceeded."""
        gates = [d["gate"] for d in zero_trace.decisions]
        assert gates == ["p_sharp", "lower_bound", "coercivity", "coercivity"]
        assert all(d["action"] == "proceed" for d in zero_trace.decisions)

    def test_summary_and_energies(self, zero_trace, schedule):
        """Test the per-level summary and ball energies."""
        summary = zero_trace.summary()
        assert isinstance(summary, pd.DataFrame)
        assert list(summary["level"]) == [1, 2]
        energies = level_energies(zero_trace, schedule.ball)
        assert list(energies.columns) == ["level", "energy", "energy_pm1"]
        assert (energies["energy"] > 0).all()

    def test_energy_stability_on_trace(self, zero_trace):
        """Test that the constant solutions have identical ball energies on every level."""
        assert list(zero_trace.level_energy["level"]) == [1, 2]
        stab = zero_trace.stability
        assert list(stab["level"]) == [1]
        assert stab["spread"].iloc[0] == pytest.approx(0.0, abs=1e-6)
        assert bool(stab["passed"].iloc[0])


class TestEnergyStability:
    """Test level-to-level energy variation."""

    def test_tail_spreads(self):
        """Test that each row measures max/min - 1 over the levels from j on."""
        df = pd.DataFrame({"level": [1, 2, 3], "energy": [1.0, 1.2, 1.25], "energy_pm1": [2.0, 2.0, 2.1]})
        stab = energy_stability(df, limit=0.10)
        assert list(stab["level"]) == [1, 2]
        assert stab["spread"].tolist() == pytest.approx([0.25, 1.25 / 1.2 - 1.0])
        assert stab["spread_pm1"].tolist() == pytest.approx([0.05, 0.05])
        assert stab["passed"].tolist() == [False, True]

    def test_single_level(self):
        """Test that one level gives an empty table."""
        df = pd.DataFrame({"level": [1], "energy": [1.0], "energy_pm1": [1.0]})
        assert energy_stability(df).empty


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
