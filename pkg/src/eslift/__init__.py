"""Measure-lifted global optimisation on SO(3) and a desk-scale cryo-EM
joint 3D-map/rotation refinement pipeline built on top of it."""

from .errors import (
    AntipodalPointError,
    DegenerateAlignmentError,
    DegenerateLossesError,
    EmptyRunError,
    EsliftError,
    MemoryBudgetError,
    MissingAssetError,
    NonFiniteError,
    NonPositiveGammaError,
    NonPositiveSigmaError,
    NotPositiveDefiniteError,
    OutOfDomainError,
    SamplingTooSmallError,
    SupportTooSpreadError,
    ZeroVolumeError,
)
from .manifold import (
    BilinearForm,
    EllipsoidSpec,
    Rotation,
    TangentVector,
    ellipsoid_contains,
    interval_distance,
    interval_exp,
    interval_log,
    so3_distance,
    so3_exp,
    so3_log,
)
from .simplex import SimplexProjection, cutoff_integer, project_simplex
from .esl import (
    EslConfig,
    EslResult,
    LiftedWeights,
    barycentre,
    error_bound,
    esl_minimise,
    estimate_gamma,
    lifted_weights,
    sparsity_bounds,
    support_ratio_prediction,
)
from .sampling import (
    DiscrepancyReport,
    SamplingSet,
    VOL_INTERVAL,
    VOL_SO3,
    ellipsoid_volume_estimate,
    interval_decay_report,
    interval_lds,
    interval_lds_sizes,
    local_discrepancy,
    refine_so3_mesh,
    so3_base_mesh,
    so3_mesh,
    unit_ball_volume,
)
from .cryoem import (
    CtfParams,
    Dataset,
    ImageStack,
    Volume,
    adjoint,
    blur_volume,
    ctf_fourier,
    forward,
    generate_dataset,
    phantom_volume,
    project_z,
    rotate_volume,
)
from .metrics import (
    AlignmentResult,
    ErrorTableRow,
    align_rotations,
    euler_zyz,
    relion_like_weights,
    summarize,
    w2_to_dirac,
)
from .refine import (
    RefinementConfig,
    RefinementState,
    default_parameters,
    joint_refine,
    rotation_losses,
    update_rotations,
    update_volume,
)

__version__ = "0.1.0"
