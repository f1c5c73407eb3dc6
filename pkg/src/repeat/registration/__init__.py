"""Fixed-to-moving registration: affine initialization and B-spline FFD."""
from .bspline import (
    ControlPointGrid,
    bending_energy,
    bspline_evaluate,
    cubic_basis,
    evaluate_on_geometry,
    grid_for_geometry,
    refine,
)
from .metrics import AffineParams, Metric, MetricProblem, Transform, ncc_metric, ssd_metric
from .core import (
    CostRecord,
    RegistrationConfig,
    RegistrationResult,
    affine_register,
    center_of_mass_init,
    compose_to_dense,
    ffd_register,
    register,
)

__all__ = [
    "AffineParams",
    "ControlPointGrid",
    "CostRecord",
    "Metric",
    "MetricProblem",
    "RegistrationConfig",
    "RegistrationResult",
    "Transform",
    "affine_register",
    "bending_energy",
    "bspline_evaluate",
    "center_of_mass_init",
    "compose_to_dense",
    "cubic_basis",
    "evaluate_on_geometry",
    "ffd_register",
    "grid_for_geometry",
    "ncc_metric",
    "refine",
    "register",
    "ssd_metric",
]
