from __future__ import annotations
import math
from datetime import datetime, timezone
from typing import Dict, Tuple

from .core import ProblemParams
from .errors import GateRefusal


def check_gate(gate: str, measured: float, limit: float) -> Tuple[bool, Dict]:
    """
    Returns (passes, decision_dict); a gate passes when measured < limit.
    decision_dict includes: timestamp_utc, gate, measured, limit, action
    """
    ok = bool(math.isfinite(measured) and measured < limit)
    decision = {
        "timestamp_utc": datetime.now(timezone.utc).isoformat(),
        "gate": gate,
        "measured": float(measured),
        "limit": float(limit),
        "action": "proceed" if ok else "refuse",
    }
    return ok, decision


def coercivity_gate(lambda_hat: float) -> Tuple[bool, Dict]:
    return check_gate("coercivity", lambda_hat, 1.0)


def p_sharp_gate(lambda_hat: float, params: ProblemParams) -> Tuple[bool, Dict]:
    """lambda < p^# = (p-1)^{2-p} (p >= 2) or 1 (p < 2)."""
    return check_gate("p_sharp", lambda_hat, params.p_sharp)


def lower_bound_gate(Lambda_hat: float) -> Tuple[bool, Dict]:
    return check_gate("lower_bound", Lambda_hat, math.inf)


def lambda_s_gate(lambda_hat: float, s: float, limit: float) -> Tuple[bool, Dict]:
    ok, decision = check_gate("lambda_s", lambda_hat, limit)
    decision["s"] = float(s)
    return ok, decision


def enforce(ok: bool, decision: Dict) -> Dict:
    """Raise GateRefusal for a refused decision, otherwise hand it back."""
    if not ok:
        raise GateRefusal(decision["gate"], decision["measured"], decision["limit"], decision=decision)
    return decision
