"""Deep Gaussian process surrogates with uncertainty propagation for Darcy flow."""

__version__ = "0.1.0"

from .kernels import (RBFParams, ARDParams, rbf_eval, ard_eval, gram, chol_psd,
                      DimensionMismatchError, SingularMatrixError)
from .random_field import (Grid2D, ExpCovSpec, KLExpansion, exp_cov,
                           kle_decompose, sample_log_field, permeability,
                           std_normal_inv_cdf, std_normal_cdf)
from .darcy import SourceSpec, DarcySolution, source_term, solve, restrict

__all__ = [
    "RBFParams", "ARDParams", "rbf_eval", "ard_eval", "gram", "chol_psd",
    "DimensionMismatchError", "SingularMatrixError",
    "Grid2D", "ExpCovSpec", "KLExpansion", "exp_cov", "kle_decompose",
    "sample_log_field", "permeability", "std_normal_inv_cdf", "std_normal_cdf",
    "SourceSpec", "DarcySolution", "source_term", "solve", "restrict",
    "__version__",
]
