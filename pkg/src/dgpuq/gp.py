"""Exact (dense) Gaussian process regression with a zero mean function.

Used as the first layer of the deep model (the mapping from observed
inputs) and as the oracle baseline that the variational layers are tested
against.  Output columns are independent and share one kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .kernels import RBFParams, gram, chol_psd, pairwise_sqdist, DimensionMismatchError
from .optimize import ascend

__all__ = ["GPModel", "build_model", "log_marginal", "log_marginal_grad", "fit", "predict"]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GPModel:
    """Trained exact-GP state with a cached Cholesky factor of K + noise*I."""

    kernel: RBFParams
    noise_var: float
    train_x: np.ndarray   # (n, kappa)
    train_y: np.ndarray   # (n, nu)
    chol_cache: np.ndarray  # lower factor of gram(X, X) + noise_var * I

    @property
    def n(self):
        return self.train_x.shape[0]


def build_model(kernel: RBFParams, noise_var: float, X, Y) -> GPModel:
    """Assemble a model and its factorization cache."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[0] != X.shape[0]:
        raise DimensionMismatchError("training rows", X.shape[0], Y.shape[0])
    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    Kn = gram(X, X, kernel) + noise_var * np.eye(X.shape[0])
    L, _ = chol_psd(Kn)
    return GPModel(kernel=kernel, noise_var=float(noise_var),
                   train_x=X, train_y=Y, chol_cache=L)


def log_marginal(model: GPModel) -> float:
    """Sum over output columns of log N(y_j | 0, K + noise*I)."""
    L = model.chol_cache
    Y = model.train_y
    n, nu = Y.shape
    alpha = scipy.linalg.solve_triangular(L, Y, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return float(-0.5 * np.sum(alpha * alpha) - 0.5 * nu * (logdet + n * LOG_2PI))


def log_marginal_grad(model: GPModel):
    """Gradient of the log marginal w.r.t. (log tau0_sq, log b, log noise_var).

    Uses d/dtheta = 0.5 tr((sum_j alpha_j alpha_j^T - nu * Kinv) dK/dtheta)
    with alpha_j = Kinv y_j; the per-dimension scale gradients are assembled
    with one matrix product instead of a loop over dimensions.
    """
    X, Y, L = model.train_x, model.train_y, model.chol_cache
    n, nu = Y.shape
    kern = model.kernel
    Kinv_Y = scipy.linalg.cho_solve((L, True), Y)
    Kinv = scipy.linalg.cho_solve((L, True), np.eye(n))
    W = Kinv_Y @ Kinv_Y.T - nu * Kinv  # so that dL/dtheta = 0.5 tr(W dK/dtheta)

    K = gram(X, X, kern)
    WK = W * K
    g_log_tau = 0.5 * float(np.sum(WK))
    # sum_ij WK_ij (x_ik - x_jk)^2 for every k at once
    row = WK.sum(axis=1)
    col = WK.sum(axis=0)
    quad = np.einsum("ik,ij,jk->k", X, WK, X, optimize=True)
    sq = X * X
    d_b = sq.T @ row + sq.T @ col - 2.0 * quad
    g_log_b = 0.5 * (-kern.lengthscale_inv) * d_b
    g_log_noise = 0.5 * model.noise_var * float(np.trace(W))
    return g_log_tau, g_log_b, g_log_noise


def _median_heuristic(X, max_points=200):
    """Per-dimension inverse scales from the overall median squared distance."""
    n = X.shape[0]
    sub = X[:: max(1, n // max_points)]
    sq = pairwise_sqdist(sub, sub, np.ones(X.shape[1]))
    med = float(np.median(sq[np.triu_indices_from(sq, k=1)]))
    if med <= 0:
        med = 1.0
    return np.full(X.shape[1], 1.0 / med)


def fit(X, Y, init: RBFParams = None, noise_var=None, iters=100,
        return_trace=False):
    """Maximize the log marginal over hyperparameters in log space.

    Returns the refitted model (and the objective trace when asked); the
    trace is nondecreasing by construction of the line search.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("need at least two training points")
    kappa = X.shape[1]
    y_var = float(np.var(Y))
    if y_var == 0.0:
        y_var = 1.0
    if init is None:
        init = RBFParams(tau0_sq=y_var, lengthscale_inv=_median_heuristic(X))
    if noise_var is None:
        noise_var = 0.01 * y_var

    def unpack(theta):
        tau = float(np.exp(theta[0]))
        b = np.exp(theta[1:1 + kappa])
        nv = float(np.exp(theta[-1]))
        return RBFParams(tau0_sq=tau, lengthscale_inv=b), nv

    def value_and_grad(theta, need_grad=True):
        try:
            kern, nv = unpack(theta)
            model = build_model(kern, nv, X, Y)
            f = log_marginal(model)
            if not need_grad:
                return f, None
            gt, gb, gn = log_marginal_grad(model)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return -np.inf, None
        return f, np.concatenate([[gt], gb, [gn]])

    theta0 = np.concatenate([[np.log(init.tau0_sq)],
                             np.log(init.lengthscale_inv),
                             [np.log(noise_var)]])
    theta, trace = ascend(value_and_grad, theta0, iters)
    kern, nv = unpack(theta)
    model = build_model(kern, nv, X, Y)
    if return_trace:
        return model, trace
    return model


def predict(model: GPModel, Xstar):
    """Predictive mean (n*, nu) and covariance (n*, n*) at test inputs.

    Solved through the cached Cholesky factor; the covariance is shared by
    all output columns and symmetrized on return.
    """
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != model.train_x.shape[1]:
        raise DimensionMismatchError("predict columns",
                                     model.train_x.shape[1], Xstar.shape[1])
    L = model.chol_cache
    Ks = gram(model.train_x, Xstar, model.kernel)   # (n, n*)
    Kss = gram(Xstar, Xstar, model.kernel)
    alpha = scipy.linalg.cho_solve((L, True), model.train_y)
    mean = Ks.T @ alpha
    v = scipy.linalg.solve_triangular(L, Ks, lower=True)
    cov = Kss - v.T @ v
    cov = 0.5 * (cov + cov.T)
    return mean, cov
