"""Log-normal permeability fields via a truncated Karhunen-Loeve expansion.

The underlying Gaussian field has an exponential (separable) covariance on
the unit square.  The covariance operator is discretized at cell centers
with uniform Nystrom weights (cell area); the retained eigenpairs give a
basis of scaled eigenfields so that a standard-normal coefficient vector
reproduces the truncated covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.special

from .kernels import DimensionMismatchError

__all__ = [
    "Grid2D",
    "ExpCovSpec",
    "KLExpansion",
    "exp_cov",
    "kle_decompose",
    "sample_log_field",
    "permeability",
    "std_normal_inv_cdf",
    "std_normal_cdf",
]


@dataclass(frozen=True)
class Grid2D:
    """Uniform cell-centered grid on the unit square.

    Fields are flattened row-major with x fastest: flat index = iy * nx + ix.
    Every module uses this convention.
    """

    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return 1.0 / (self.nx * self.ny)

    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) array of cell-center coordinates, x fastest."""
        xs = (np.arange(self.nx) + 0.5) / self.nx
        ys = (np.arange(self.ny) + 0.5) / self.ny
        X, Y = np.meshgrid(xs, ys)  # row-major: Y varies along axis 0
        return np.column_stack([X.ravel(), Y.ravel()])

    def to_2d(self, flat: np.ndarray) -> np.ndarray:
        """Reshape a flat field to (ny, nx) with [iy, ix] indexing."""
        return np.asarray(flat).reshape(self.ny, self.nx)


@dataclass(frozen=True)
class ExpCovSpec:
    """Exponential covariance: variance, per-axis correlation lengths, mean."""

    s_g_sq: float = 1.0
    lambdas: tuple = (0.1, 0.1)
    mean: float = 0.0

    def __post_init__(self):
        if not self.s_g_sq > 0:
            raise ValueError("s_g_sq must be positive")
        if len(self.lambdas) != 2 or not all(l > 0 for l in self.lambdas):
            raise ValueError("lambdas must be two positive correlation lengths")


@dataclass
class KLExpansion:
    """Truncated Karhunen-Loeve basis for the log-permeability field.

    ``eigenfields[k]`` is the k-th eigenfunction evaluated at cell centers,
    scaled by sqrt(eigenvalue), so ``mean + w @ eigenfields`` with standard
    normal ``w`` has the truncated covariance of the target field.
    """

    eigenvalues: np.ndarray          # nonincreasing, >= 0, length k_xi
    eigenfields: np.ndarray          # (k_xi, nx*ny)
    mean: float
    grid: Grid2D
    spec: ExpCovSpec = field(default=None)

    @property
    def k_xi(self) -> int:
        return self.eigenvalues.shape[0]


def exp_cov(xs1, xs2, spec: ExpCovSpec) -> float:
    """Exponential covariance between two spatial points."""
    xs1 = np.asarray(xs1, dtype=float)
    xs2 = np.asarray(xs2, dtype=float)
    d = np.abs(xs1 - xs2) / np.asarray(spec.lambdas, dtype=float)
    return float(spec.s_g_sq * np.exp(-np.sum(d)))


def _cov_matrix(centers: np.ndarray, spec: ExpCovSpec) -> np.ndarray:
    lam = np.asarray(spec.lambdas, dtype=float)
    dx = np.abs(centers[:, None, 0] - centers[None, :, 0]) / lam[0]
    dy = np.abs(centers[:, None, 1] - centers[None, :, 1]) / lam[1]
    return spec.s_g_sq * np.exp(-(dx + dy))


def kle_decompose(grid: Grid2D, spec: ExpCovSpec, k_xi: int) -> KLExpansion:
    """Dense eigendecomposition of the cell-center covariance matrix.

    Nystrom discretization with uniform cell-area weights: eigenvalues are
    those of ``area * C``; eigenfunctions are unit discrete-L2 normalized
    and then scaled by sqrt(eigenvalue).
    """
    if k_xi < 1 or k_xi > grid.n_cells:
        raise ValueError(f"k_xi must be in [1, {grid.n_cells}], got {k_xi}")
    centers = grid.cell_centers()
    C = _cov_matrix(centers, spec)
    area = grid.cell_area
    # symmetric eigenproblem for the weighted operator; uniform weights keep it symmetric
    vals, vecs = np.linalg.eigh(area * C)
    order = np.argsort(vals)[::-1][:k_xi]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude entry positive
    for k in range(k_xi):
        j = np.argmax(np.abs(vecs[:, k]))
        if vecs[j, k] < 0:
            vecs[:, k] = -vecs[:, k]
    # psi_k = sqrt(eigval) * unit-norm eigenvector / sqrt(area)
    fields = (np.sqrt(vals)[:, None] * vecs.T) / np.sqrt(area)
    return KLExpansion(eigenvalues=vals, eigenfields=fields, mean=spec.mean,
                       grid=grid, spec=spec)


def sample_log_field(kle: KLExpansion, w) -> np.ndarray:
    """Evaluate mean + sum_k w_k psi_k at every cell center."""
    w = np.asarray(w, dtype=float).ravel()
    if w.shape[0] != kle.k_xi:
        raise DimensionMismatchError("sample_log_field coefficients", kle.k_xi, w.shape[0])
    return kle.mean + w @ kle.eigenfields


def std_normal_cdf(x):
    """Standard normal CDF."""
    return scipy.special.ndtr(x)


def std_normal_inv_cdf(u):
    """Standard normal inverse CDF on the open interval (0, 1)."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("std_normal_inv_cdf requires 0 < u < 1")
    out = scipy.special.ndtri(u)
    return float(out) if out.ndim == 0 else out


def permeability(kle: KLExpansion, xi) -> np.ndarray:
    """Permeability field exp{mean + sum_k PhiInv(xi_k) psi_k}, xi in (0,1)^k."""
    xi = np.asarray(xi, dtype=float).ravel()
    if xi.shape[0] != kle.k_xi:
        raise DimensionMismatchError("permeability coefficients", kle.k_xi, xi.shape[0])
    w = std_normal_inv_cdf(xi)
    return np.exp(sample_log_field(kle, w))
