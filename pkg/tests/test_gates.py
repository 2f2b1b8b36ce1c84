#!/usr/bin/env python3
"""
Unit tests for formbound.gates module.
Tests gate decisions and enforcement.
"""
import math
import pytest
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from formbound.core import ProblemParams
from formbound.errors import GateRefusal
from formbound.gates import (
    check_gate,
    coercivity_gate,
    enforce,
    lambda_s_gate,
    lower_bound_gate,
    p_sharp_gate,
)


class TestCheckGate:
    """Test the generic gate comparison."""

    def test_passes_below_limit(self):
        """Test that measured < limit proceeds."""
        ok, decision = check_gate("coercivity", 0.5, 1.0)
        assert ok
        assert decision["action"] == "proceed"
        assert decision["gate"] == "coercivity"
        assert "timestamp_utc" in decision

    def test_refuses_at_limit(self):
        """Test that equality is refused."""
        ok, decision = check_gate("coercivity", 1.0, 1.0)
        assert not ok
        assert decision["action"] == "refuse"

    def test_refuses_nan(self):
        """Test that a NaN measurement is refused."""
        ok, _ = check_gate("coercivity", float("nan"), 1.0)
        assert not ok


class TestNamedGates:
    """Test the named gates and their limits."""

    def test_coercivity_limit(self):
        """Test that coercivity is measured against 1."""
        _, decision = coercivity_gate(0.9)
        assert decision["limit"] == 1.0

    @pytest.mark.parametrize("p,limit", [(1.5, 1.0), (2.0, 1.0), (3.0, 0.5), (4.0, 1.0 / 9.0)])
    def test_p_sharp(self, p, limit):
        """Test p# = (p-1)^{2-p} for p >= 2 and 1 below."""
        _, decision = p_sharp_gate(0.0, ProblemParams(5, p))
        assert decision["limit"] == pytest.approx(limit)

    def test_lower_bound_accepts_finite(self):
        """Test that any finite Lambda proceeds."""
        ok, decision = lower_bound_gate(1e6)
        assert ok
        assert math.isinf(decision["limit"])

    def test_lambda_s_records_exponent(self):
        """Test that the lambda(s) decision carries s."""
        ok, decision = lambda_s_gate(0.5, 4.0, 0.75)
        assert ok
        assert decision["s"] == 4.0


class TestEnforce:
    """Test gate enforcement."""

    def test_returns_decision(self):
        """Test that a passing decision is handed back."""
        decision = enforce(*coercivity_gate(0.25))
        assert decision["measured"] == 0.25

    def test_raises_refusal(self):
        """Test that a refused decision raises with its numbers."""
        with pytest.raises(GateRefusal) as exc:
            enforce(*p_sharp_gate(0.75, ProblemParams(5, 3.0)))
        assert exc.value.details() == {"gate": "p_sharp", "measured": 0.75, "limit": 0.5}
        assert exc.value.exit_code == 3

    def test_refusal_carries_decision(self):
        """Test that the refusal keeps the timestamped decision it was raised from."""
        ok, decision = p_sharp_gate(0.75, ProblemParams(5, 3.0))
        with pytest.raises(GateRefusal) as exc:
            enforce(ok, decision)
        assert exc.value.decision is decision
        assert exc.value.decision["action"] == "refuse"
        assert "timestamp_utc" in exc.value.decision


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
