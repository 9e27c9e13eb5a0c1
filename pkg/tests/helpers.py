"""Shared test oracles: independent of the implementation paths they check."""

import numpy as np


def central_diff(fun, x, eps=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (fun(xp) - fun(xm)) / (2.0 * eps)
    return g


def loop_gram(A, B, kfun):
    """Double-loop Gram matrix, the entrywise pairwise-eval oracle."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    out = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            out[i, j] = kfun(A[i], B[j])
    return out


def dense_gp_logml(K, noise_var, Y):
    """Textbook log marginal with explicit inverse and determinant."""
    n = K.shape[0]
    C = K + noise_var * np.eye(n)
    Cinv = np.linalg.inv(C)
    _, logdet = np.linalg.slogdet(C)
    total = 0.0
    for j in range(Y.shape[1]):
        y = Y[:, j]
        total += -0.5 * (y @ Cinv @ y + logdet + n * np.log(2 * np.pi))
    return total


def dense_gp_predict(K, Ks, Kss, noise_var, Y):
    """Textbook predictive moments with explicit inverse."""
    Cinv = np.linalg.inv(K + noise_var * np.eye(K.shape[0]))
    mean = Ks.T @ Cinv @ Y
    cov = Kss - Ks.T @ Cinv @ Ks
    return mean, cov


def erf_series(x, terms=80):
    """Maclaurin series of erf, independent of scipy's implementation."""
    s = 0.0
    term = x
    n = 0
    while n < terms:
        s += term / (2 * n + 1)
        n += 1
        term *= -x * x / n
    return 2.0 / np.sqrt(np.pi) * s


def phi_inv_bisect(u, iters=200):
    """Inverse standard-normal CDF by bisection on the erf series."""
    lo, hi = -10.0, 10.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + erf_series(mid / np.sqrt(2.0))) < u:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def mc_phi_oracle(kernel, means, variances, Z, n_samples, seed):
    """Monte Carlo estimates of the kernel expectations and their SEs.

    Returns (phi1, se1, phi2_rows, se2) where phi2_rows[i] estimates the
    i-th data point's contribution to Phi2.
    """
    rng = np.random.default_rng(seed)
    n, q = means.shape
    m = Z.shape[0]
    H = means[:, None, :] + np.sqrt(variances)[:, None, :] * \
        rng.standard_normal((n, n_samples, q))
    d = H[:, :, None, :] - Z[None, None, :, :]
    Kfu = kernel.sigma_h_sq * np.exp(
        -0.5 * np.sum(kernel.weights * d * d, axis=-1))    # (n, N, m)
    phi1 = Kfu.mean(axis=1)
    se1 = Kfu.std(axis=1) / np.sqrt(n_samples)
    prod = Kfu[:, :, :, None] * Kfu[:, :, None, :]         # (n, N, m, m)
    phi2_rows = prod.mean(axis=1)
    se2 = prod.std(axis=1) / np.sqrt(n_samples)
    return phi1, se1, phi2_rows, se2
