"""Tight sensitivities and coresets for k-SVD and k-PCA."""
from .core import (
    DegenerateInputError,
    NonConvergenceError,
    NumericalError,
    RankZeroError,
    ScaledMatrix,
    SubspaceQuery,
    ThinSvd,
    WeightedPointSet,
    build_scaled_matrix,
    subspace_cost,
    sym_eig_desc,
    thin_svd,
)
from .coreset import Coreset, StreamTree, sample_coreset, sample_size, stream_finalize, stream_push
from .evaluation import (
    ExperimentReport,
    check_lift_inequalities,
    coreset_error,
    opt_cost,
    oracle_affine_sensitivity,
    oracle_nonaffine_sensitivity,
    run_experiment,
    solve_optimal,
)
from .sensitivity import (
    LiftConfig,
    SensitivityVector,
    TraceRatioState,
    affine_sensitivities_all,
    affine_sensitivity,
    baseline_projection_sensitivities,
    leverage_sensitivities,
    lift_config,
    lift_points,
    nonaffine_sensitivities_all,
    nonaffine_sensitivity,
    uniform_sensitivities,
)

__version__ = "0.1.0"

__all__ = [
    "affine_sensitivities_all",
    "affine_sensitivity",
    "baseline_projection_sensitivities",
    "build_scaled_matrix",
    "check_lift_inequalities",
    "Coreset",
    "coreset_error",
    "DegenerateInputError",
    "ExperimentReport",
    "leverage_sensitivities",
    "lift_config",
    "lift_points",
    "LiftConfig",
    "nonaffine_sensitivities_all",
    "nonaffine_sensitivity",
    "NonConvergenceError",
    "NumericalError",
    "opt_cost",
    "oracle_affine_sensitivity",
    "oracle_nonaffine_sensitivity",
    "RankZeroError",
    "run_experiment",
    "sample_coreset",
    "sample_size",
    "ScaledMatrix",
    "SensitivityVector",
    "solve_optimal",
    "stream_finalize",
    "stream_push",
    "StreamTree",
    "subspace_cost",
    "SubspaceQuery",
    "sym_eig_desc",
    "thin_svd",
    "ThinSvd",
    "TraceRatioState",
    "uniform_sensitivities",
    "WeightedPointSet",
]
