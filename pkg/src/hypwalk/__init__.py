"""hypwalk: a desk-scale laboratory for random walks on hyperbolic models.

Two bundled geometries (free groups on their Cayley trees, the upper
half-plane), exact length-chain oracles for nearest-neighbor free-group
walks, the constant-drift cocycle construction with martingale traces,
and estimators for the walk's deviation curve, its rate function, and
their curvature at the drift.
"""

from .errors import (
    ConfigError,
    GridError,
    HypwalkError,
    ModelMismatchError,
    NumericDegeneracyError,
    SolverDivergedError,
    TruncationError,
    UnsupportedMeasureError,
)
from .spaces import (
    FreeBoundary,
    FreeGroupModel,
    InteriorPoint,
    PlaneBoundary,
    PlaneModel,
    check_non_elementary,
    geometry_report,
    hyperbolicity_defect,
)
from .measures import (
    StepMeasure,
    convolution_measure,
    convolution_support,
    dirac,
    non_arithmetic_check,
    uniform_measure,
    validate_measure,
)
from .lengthchain import (
    LengthChainOracle,
    TailRunChain,
    build_length_chain,
    solve_boundary_letter_law,
)
from .sampling import SeedSpec, Trajectory, sample_path
from .centering import (
    DriftCocycle,
    PsiSolution,
    accelerated_variance,
    conditional_mgf_bound_check,
    difference_bound_check,
    drift_of,
    freedman_f,
    martingale_trace,
    sigma_sq_occupation,
    solve_centering,
    solve_cocycle,
    submartingale_transform_check,
    v_mu,
)
from .freedman import (
    DiscreteDistribution,
    freedman_base_check,
    fuzz_freedman_base,
    fuzz_scalar_inequality,
    scalar_inequality_check,
)
from .estimators import (
    CurvatureFit,
    LaplaceCurve,
    RateCurve,
    azuma_bound,
    cesaro_block_bound,
    curvature_at_drift,
    estimate_clt_variance,
    estimate_drift,
    estimate_laplace,
    fekete_upper_bound,
    laplace_control_check,
    legendre_transform,
    punctual_deviation_probe,
    qv_ldp_probe,
    rate_curvature,
)
from .stats import EstimateWithCI

__version__ = "0.1.0"
