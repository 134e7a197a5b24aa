"""Gaussian-process kernels of infinitely wide convolutional networks."""

from .data_model import (
    ArchConfig,
    ClassKernel,
    CovDiag,
    CovFull,
    InputSet,
    LinearPostOp,
    ReadoutSpec,
    ShapeError,
    SpatialCollapseError,
)
from .kernel_ops import apply_A, apply_A_diag, apply_A_lcn, apply_B, apply_C, moment_fixed_point_q
from .mc import kernel_distance, mc_estimate, mc_readout
from .propagation import (
    TrackError,
    kernel_matrix,
    phase_scan,
    propagate,
    readout,
    readout_pool,
    readout_project,
    readout_subsample,
    readout_vectorize,
)
from .regress import LadderSpec, RegressionProblem, accuracy, encode_labels, posterior, solve_with_ladder

__version__ = "0.1.0"
