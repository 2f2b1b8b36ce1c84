__all__ = [
    "analysis",
    "cli",
    "config",
    "core",
    "decompose",
    "errors",
    "gates",
    "measure",
    "operators",
    "pipeline",
    "plots",
    "reports",
    "solver",
    "weights",
    "verify_hardy_exponent",
]


def verify_hardy_exponent(n=3, p=2.0, t=0.75, inner=0.05, cells=2048):
    """Solve the Hardy problem with exact traces on [inner, 1] and compare with |x|^gamma."""
    import numpy as np
    from .core import ProblemParams, radial_mesh
    from .operators import OperatorSpec
    from .solver import SolveConfig, radial_exponent, solve_local
    from .weights import hardy_weight

    params = ProblemParams(n, p)
    gamma = radial_exponent(params, t)
    mesh = radial_mesh(inner, 1.0, n, cells, "log")
    cfg = SolveConfig(continuation_steps=1 if p == 2.0 else 4)
    res = solve_local(OperatorSpec.p_laplacian(params), hardy_weight(params, t), mesh, cfg,
                      boundary=lambda x: np.linalg.norm(x, axis=1) ** gamma)
    exact = mesh.radii ** gamma
    return res.u, {
        "gamma": gamma,
        "max_relative_error": float(np.max(np.abs(res.u.values - exact) / exact)),
        "iterations": res.iterations,
    }
