"""Noncommutative Calderon-Zygmund decomposition and square functions on finite tori."""

__version__ = "0.1.0"

from .space import Space, build_torus_space, measure_annular_decay  # noqa: E402
from .cubes import CubeSystem, CubeAxiomViolation, build_cube_system, certify_axioms  # noqa: E402
from .weights import Weight, make_weight, ap_characteristic, a1_characteristic  # noqa: E402
from .opfun import OpField, ProjectionField, lp_norm, trace_phi, rademacher_average  # noqa: E402
from .transforms import OperatorContext, make_context, square_differences  # noqa: E402
from .cz import CZParts, WindowTooNarrow, cuculescu, cz_decompose, zeta_projection  # noqa: E402

__all__ = [
    "__version__",
    "Space", "build_torus_space", "measure_annular_decay",
    "CubeSystem", "CubeAxiomViolation", "build_cube_system", "certify_axioms",
    "Weight", "make_weight", "ap_characteristic", "a1_characteristic",
    "OpField", "ProjectionField", "lp_norm", "trace_phi", "rademacher_average",
    "OperatorContext", "make_context", "square_differences",
    "CZParts", "WindowTooNarrow", "cuculescu", "cz_decompose", "zeta_projection",
]
