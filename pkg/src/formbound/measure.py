from __future__ import annotations
import logging
import time
from typing import Any, Callable, Dict, Sequence

import numpy as np
from sklearn.linear_model import LinearRegression

from .errors import InputError

logger = logging.getLogger(__name__)


def track_execution(func: Callable[..., Any], *, label: str = "", **kwargs) -> Dict[str, Any]:
    """
    Runs func(**kwargs) and measures wall-clock runtime.
    Returns: {"result": Any, "runtime_s": float}
    """
    t0 = time.perf_counter()
    result = func(**kwargs)
    runtime_s = time.perf_counter() - t0
    if label:
        logger.info("%s finished in %.3f s", label, runtime_s)
    return {"result": result, "runtime_s": runtime_s}


def fit_rate(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of y against x (pass logs for a log-log rate)."""
    xa = np.asarray(x, dtype=float).reshape(-1, 1)
    ya = np.asarray(y, dtype=float).reshape(-1)
    if xa.shape[0] != ya.shape[0] or xa.shape[0] < 2:
        raise InputError("rate fit needs at least two matching points")
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise InputError("rate fit needs finite data")
    model = LinearRegression().fit(xa, ya)
    return float(model.coef_[0])


def refinement_ratios(errors: Sequence[float]) -> np.ndarray:
    """e_k / e_{k+1} for a sequence of errors under successive mesh doubling."""
    e = np.asarray(errors, dtype=float)
    if e.size < 2:
        raise InputError("refinement ratios need at least two errors")
    return e[:-1] / e[1:]
