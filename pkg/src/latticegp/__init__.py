"""Gaussian-process regression with sparse simplicial-lattice kernel filtering.

Kernel matrix-vector products are replaced by splat / blur / slice passes
over a permutohedral lattice, giving O(d^2 (n + m)) MVMs that drive
conjugate-gradient inference, stochastic log-determinants, and filtered
hyperparameter gradients.  A dense exact-kernel oracle backs every fast path
at desk scale.
"""

from .filtering import LatticeOperator
from .kernels import KernelProfile, StationaryKernelSpec, evaluate, normalized_sq_dist, numeric_fourier, profile
from .lattice import EmbeddingBasis, KeySet, LatticeStore, SplatPlan, blur, build_plan, build_plans, neighbor, slice_at, splat
from .solver import CGConfig, GPModel, MLLReport, ProbeSet, SolveReport, Standardization, cg_solve, logdet_slq, mll, predictive_mean, predictive_variance, test_nll
from .stencil import Stencil, build_stencil, find_spacing, frequency_coverage, spatial_coverage
from .trainer import TrainConfig, TrainTrace, fit, fit_exact, mll_gradients

__version__ = "0.1.0"

__all__ = [
    "CGConfig",
    "EmbeddingBasis",
    "GPModel",
    "KernelProfile",
    "KeySet",
    "LatticeOperator",
    "LatticeStore",
    "MLLReport",
    "ProbeSet",
    "SolveReport",
    "SplatPlan",
    "Standardization",
    "StationaryKernelSpec",
    "Stencil",
    "TrainConfig",
    "TrainTrace",
    "blur",
    "build_plan",
    "build_plans",
    "build_stencil",
    "cg_solve",
    "evaluate",
    "find_spacing",
    "fit",
    "fit_exact",
    "frequency_coverage",
    "logdet_slq",
    "mll",
    "mll_gradients",
    "neighbor",
    "normalized_sq_dist",
    "numeric_fourier",
    "predictive_mean",
    "predictive_variance",
    "profile",
    "slice_at",
    "spatial_coverage",
    "splat",
    "test_nll",
]
