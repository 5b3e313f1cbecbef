"""Transport-bounded image perturbations: projection, attacks, audits."""

from .errors import (
    BadMagic,
    CheckpointFormatError,
    DimensionMismatch,
    InstanceTooLarge,
    LabelImageCountMismatch,
    NotFittedError,
    NumericalOverflow,
    RangeViolation,
    TruncatedFile,
    WadvError,
    ZeroGradient,
    ZeroMassChannel,
)
from .imagecore import (
    BallSpec,
    CostMatrix,
    MembershipReport,
    NormalizedImage,
    ball_membership,
    build_cost_matrix,
    dim,
    entropic_cost,
    normalize,
    unnormalize,
    wasserstein_distance,
)
from .sinkhorn import (
    ATTACK_LIMITS,
    TRAINING_LIMITS,
    DualState,
    ProjectionLimits,
    ProjectionProblem,
    ProjectionReport,
    WassersteinProjection,
    cold_duals,
    dual_objective,
    lambert_w,
    project,
    project_batch,
    project_distributions,
    recover_plan,
    recover_point,
    wright_omega,
)

__version__ = "0.1.0"

__all__ = [
    "ATTACK_LIMITS",
    "TRAINING_LIMITS",
    "BadMagic",
    "BallSpec",
    "CheckpointFormatError",
    "CostMatrix",
    "DimensionMismatch",
    "DualState",
    "InstanceTooLarge",
    "LabelImageCountMismatch",
    "MembershipReport",
    "NormalizedImage",
    "NotFittedError",
    "NumericalOverflow",
    "ProjectionLimits",
    "ProjectionProblem",
    "ProjectionReport",
    "RangeViolation",
    "TruncatedFile",
    "WadvError",
    "WassersteinProjection",
    "ZeroGradient",
    "ZeroMassChannel",
    "ball_membership",
    "build_cost_matrix",
    "cold_duals",
    "dim",
    "dual_objective",
    "entropic_cost",
    "lambert_w",
    "normalize",
    "project",
    "project_batch",
    "project_distributions",
    "recover_plan",
    "recover_point",
    "unnormalize",
    "wasserstein_distance",
    "wright_omega",
]
