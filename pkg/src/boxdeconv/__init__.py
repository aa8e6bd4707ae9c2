"""Exact reconstruction from moving rectangle averages.

Inverts the blur g = f * mu, where mu is a finite positive combination of
indicator measures of staircase-ordered rectangles, by splitting the data
across a separating direction, inverting a perturbed-identity convolution on
each side with a locally finite series, and assembling the unknown from a
mixed second derivative pushed through a quadrant lattice.
"""

from __future__ import annotations

from .errors import (
    CacheLimitExceeded,
    ConeVerificationFailed,
    DeconvError,
    DepthExceeded,
    NestingTooDeep,
    NonFiniteSlab,
    NonPositiveAdvance,
    ResidualTooLarge,
    StaircaseViolation,
    SupportMismatch,
    ZeroMeasure,
)
from .forward import (
    BlurredFn,
    QuadratureRule,
    ResidualStats,
    blur,
    default_region,
    grid_axes,
    residual_grid,
)
from .geometry import (
    BlurConfig,
    ConvexCone,
    Direction,
    HalfPlane,
    Rect,
    rect_params,
    reflect_config_x,
    validate_staircase,
)
from .measure import (
    Atom,
    Conv,
    MeasureExpr,
    QuadLattice,
    cone_for_pair,
    convolve,
    extremal_atom,
    measure,
)
from .neumann import (
    PerturbedIdentityProblem,
    SolveInfo,
    find_min_advance,
    solve_general,
    solve_perturbed_identity,
)
from .reconstruct import (
    CaseMeasures,
    CornerFamily,
    ReconstructionResult,
    ReconstructOptions,
    assemble_f,
    build_case_measures,
    reconstruct,
    rectangle_share_measures,
    split_solve,
)
from .smoothfn import (
    C2Fn,
    PolyBump,
    PolyFn,
    conv_measure,
    split_halfplane,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "BlurConfig",
    "ConvexCone",
    "Direction",
    "HalfPlane",
    "Rect",
    "rect_params",
    "reflect_config_x",
    "validate_staircase",
    "Atom",
    "Conv",
    "MeasureExpr",
    "QuadLattice",
    "cone_for_pair",
    "convolve",
    "extremal_atom",
    "measure",
    "C2Fn",
    "PolyBump",
    "PolyFn",
    "conv_measure",
    "split_halfplane",
    "PerturbedIdentityProblem",
    "SolveInfo",
    "find_min_advance",
    "solve_general",
    "solve_perturbed_identity",
    "BlurredFn",
    "QuadratureRule",
    "ResidualStats",
    "blur",
    "default_region",
    "grid_axes",
    "residual_grid",
    "CaseMeasures",
    "CornerFamily",
    "ReconstructOptions",
    "ReconstructionResult",
    "assemble_f",
    "build_case_measures",
    "reconstruct",
    "rectangle_share_measures",
    "split_solve",
    "DeconvError",
    "StaircaseViolation",
    "NonFiniteSlab",
    "ZeroMeasure",
    "ConeVerificationFailed",
    "NestingTooDeep",
    "NonPositiveAdvance",
    "DepthExceeded",
    "SupportMismatch",
    "ResidualTooLarge",
    "CacheLimitExceeded",
]
