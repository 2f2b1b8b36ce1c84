from __future__ import annotations
from typing import Any, Dict, Optional


class FormboundError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1

    def details(self) -> Dict[str, Any]:
        return {}


class InputError(FormboundError, ValueError):
    """Bad parameters, missing files, or a violated precondition."""

    exit_code = 2

    def __init__(self, message: str, *, path: Optional[str] = None):
        super().__init__(message)
        self.path = path

    def details(self) -> Dict[str, Any]:
        return {"path": self.path} if self.path else {}


class GateRefusal(FormboundError):
    """A measured constant failed a mathematical gate (coercivity, p^#, lambda(s))."""

    exit_code = 3

    def __init__(self, gate: str, measured: float, limit: float, message: Optional[str] = None, *,
                 decision: Optional[Dict[str, Any]] = None):
        self.gate = gate
        self.measured = float(measured)
        self.limit = float(limit)
        self.decision = decision
        super().__init__(
            message or f"{gate} gate refused: measured {self.measured:.6g} >= limit {self.limit:.6g}"
        )

    def details(self) -> Dict[str, Any]:
        return {"gate": self.gate, "measured": self.measured, "limit": self.limit}


class NonConvergence(FormboundError):
    """An iterative method ran out of budget."""

    exit_code = 4

    def __init__(self, message: str, *, iterations: int = 0, residual: float = float("nan")):
        super().__init__(message)
        self.iterations = int(iterations)
        self.residual = float(residual)

    def details(self) -> Dict[str, Any]:
        return {"iterations": self.iterations, "residual": self.residual}


class NegativeSolution(NonConvergence):
    """Discrete solution dipped below the nonnegativity slack."""

    def __init__(self, min_value: float, slack: float):
        super().__init__(f"min(u) = {min_value:.3e} below slack -{slack:.3e}")
        self.min_value = float(min_value)
        self.slack = float(slack)

    def details(self) -> Dict[str, Any]:
        return {"min_value": self.min_value, "slack": self.slack}
