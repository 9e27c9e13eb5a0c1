"""Bayesian GP-LVM layer engine.

One "layer" maps uncertain inputs ``h`` (a factorized Gaussian over rows)
through a sparse GP with inducing inputs to outputs that are either
observed data or, inside the deep model, another uncertain layer.  The
optimal Gaussian posterior over inducing outputs is collapsed analytically,
leaving a bound that depends on the kernel expectations

    phi0 = E[tr K_ff],   Phi1 = E[K_fu],   Phi2 = E[K_uf K_fu],

which have closed forms for the ARD kernel.  :func:`layer_bound` /
:func:`layer_bound_grads` implement the collapsed bound and its exact
gradients with respect to every input; :func:`elbo_layer` /
:func:`elbo_grad` specialize them to the stand-alone GP-LVM with a
standard-normal latent prior, and :func:`train_gplvm` optimizes that model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .kernels import (ARDParams, gram, chol_psd, DimensionMismatchError,
                      SingularMatrixError)
from .optimize import ascend
from .rng import rng_for

__all__ = [
    "VariationalLatent",
    "InducingSet",
    "PhiStats",
    "Reparam",
    "LayerState",
    "phi_stats",
    "layer_bound",
    "layer_bound_grads",
    "latent_kl",
    "elbo_layer",
    "elbo_grad",
    "train_gplvm",
    "effective_dims",
    "recover_inducing_posterior",
]

LOG_2PI = float(np.log(2.0 * np.pi))

# relative diagonal added to K_uu; scales with the signal variance so that
# gradients in log(sigma_h_sq) stay exact
KUU_JITTER = 1e-10

# jitter rises to cap the condition number at 1/RCOND_FLOOR: explicit
# inverses of worse-conditioned matrices would drown the analytic gradient
# cancellations in roundoff
RCOND_FLOOR = 1e-8


def _chol_conditioned(M, base_jitter):
    """Cholesky of ``M + jit*I`` with jit sized from the actual spectrum.

    The jitter lifts the smallest eigenvalue to about RCOND_FLOOR times the
    largest, using a soft minimum over the spectrum so the rule stays
    differentiable when small eigenvalues cluster (the usual situation when
    an ARD weight switches a dimension off).

    Returns ``(L, M + jit*I, djit_dM)``; the last entry is the derivative
    of the jitter w.r.t. the matrix when the spectral branch is active,
    else None.  Chaining it keeps the analytic gradients consistent with
    the regularized objective.
    """
    evals, vecs = np.linalg.eigh(M)
    lam_min, lam_max = float(evals[0]), float(evals[-1])
    # log-sum-exp soft minimum, smoothing scale tied to the jitter magnitude
    t = 10.0 / max(RCOND_FLOOR * lam_max, 1e-300)
    expd = np.exp(-t * (evals - lam_min))
    soft_min = lam_min - float(np.log(expd.sum())) / t
    spectral = RCOND_FLOOR * lam_max - soft_min
    jit = float(base_jitter)
    djit = None
    if spectral > jit:
        jit = spectral
        wts = expd / expd.sum()          # exact d(soft_min)/d(eigenvalues)
        v_hi = vecs[:, -1]
        djit = (RCOND_FLOOR * np.outer(v_hi, v_hi)
                - (vecs * wts[None, :]) @ vecs.T)
    eye = np.eye(M.shape[0])
    for _ in range(8):
        try:
            Mj = M + jit * eye
            return np.linalg.cholesky(Mj), Mj, djit
        except np.linalg.LinAlgError:
            jit = max(jit * 10.0, 1e-300)
    raise SingularMatrixError("matrix remained singular under jitter escalation")


@dataclass
class VariationalLatent:
    """Factorized Gaussian over latent rows: N(means[i], diag(variances[i]))."""

    means: np.ndarray      # (n, q)
    variances: np.ndarray  # (n, q), strictly positive

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape:
            raise DimensionMismatchError("latent variances", self.means.shape,
                                         self.variances.shape)
        if not np.all(self.variances > 0):
            raise ValueError("latent variances must be strictly positive")

    @property
    def n(self):
        return self.means.shape[0]

    @property
    def q(self):
        return self.means.shape[1]


@dataclass
class InducingSet:
    """Inducing inputs plus (optionally) the recovered posterior q(U)."""

    inputs: np.ndarray                 # (m, q)
    out_means: np.ndarray = None       # (m, nu)
    out_covs: np.ndarray = None        # (nu, m, m), symmetric PSD

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if self.inputs.shape[0] < 1:
            raise ValueError("need at least one inducing point")

    @property
    def m(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class PhiStats:
    """Kernel expectations under the latent distribution."""

    phi0: float          # E[tr K_ff] = n * sigma_h_sq
    phi1: np.ndarray     # (n, m)
    phi2: np.ndarray     # (m, m), symmetric PSD


@dataclass
class Reparam:
    """Natural-style parameterization of the latent posterior.

    With a standard-normal prior the latent moments are means = mu_bar and
    variances = 1 / (1 + lam); ``lam`` must be positive.
    """

    mu_bar: np.ndarray  # (n, q)
    lam: np.ndarray     # (n, q), positive

    def latent(self) -> VariationalLatent:
        return VariationalLatent(means=self.mu_bar.copy(),
                                 variances=1.0 / (1.0 + self.lam))


@dataclass
class LayerState:
    """All state of one sparse variational layer."""

    kernel: ARDParams
    beta: float                      # noise precision (1 / noise variance)
    latent: VariationalLatent
    inducing: InducingSet
    reparam: Reparam = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.kernel.dim != self.latent.q:
            raise DimensionMismatchError("kernel weights", self.latent.q,
                                         self.kernel.dim)
        if self.inducing.inputs.shape[1] != self.latent.q:
            raise DimensionMismatchError("inducing inputs", self.latent.q,
                                         self.inducing.inputs.shape[1])

    @classmethod
    def from_reparam(cls, kernel, beta, reparam: Reparam, inducing: InducingSet):
        return cls(kernel=kernel, beta=beta, latent=reparam.latent(),
                   inducing=inducing, reparam=reparam)


# ---------------------------------------------------------------------------
# Phi statistics (closed forms for the ARD kernel) and their gradients
# ---------------------------------------------------------------------------

def _phi_forward(kernel: ARDParams, means, variances, Z):
    """Return (phi0, Phi1, T, Phi2) where T[i] is the i-th term of Phi2."""
    n, q = means.shape
    m = Z.shape[0]
    w = kernel.weights
    log1 = np.zeros((n, m))
    log2 = np.zeros((n, m, m))
    for j in range(q):
        d = means[:, j, None] - Z[None, :, j]               # (n, m)
        gam = w[j] * variances[:, j] + 1.0                  # (n,)
        log1 += -0.5 * w[j] * d * d / gam[:, None] - 0.5 * np.log(gam)[:, None]
        delta = Z[:, j, None] - Z[None, :, j]               # (m, m)
        zbar = 0.5 * (Z[:, j, None] + Z[None, :, j])        # (m, m)
        rho = 2.0 * w[j] * variances[:, j] + 1.0            # (n,)
        md = means[:, j, None, None] - zbar[None, :, :]     # (n, m, m)
        log2 += (-0.25 * w[j] * (delta * delta)[None, :, :]
                 - w[j] * md * md / rho[:, None, None]
                 - 0.5 * np.log(rho)[:, None, None])
    phi1 = kernel.sigma_h_sq * np.exp(log1)
    T = kernel.sigma_h_sq ** 2 * np.exp(log2)
    phi2 = T.sum(axis=0)
    phi2 = 0.5 * (phi2 + phi2.T)
    phi0 = n * kernel.sigma_h_sq
    return phi0, phi1, T, phi2


def phi_stats(kernel: ARDParams, latent: VariationalLatent, Hu) -> PhiStats:
    """Closed-form Phi quantities for the ARD kernel."""
    Hu = np.atleast_2d(np.asarray(Hu, dtype=float))
    if Hu.shape[1] != latent.q:
        raise DimensionMismatchError("phi_stats inducing inputs", latent.q,
                                     Hu.shape[1])
    if kernel.dim != latent.q:
        raise DimensionMismatchError("phi_stats kernel weights", latent.q,
                                     kernel.dim)
    phi0, phi1, _, phi2 = _phi_forward(kernel, latent.means, latent.variances, Hu)
    return PhiStats(phi0=phi0, phi1=phi1, phi2=phi2)


def _phi_backward(kernel, means, variances, Z, phi1, T, W1, W2, w_phi0):
    """Accumulate gradients of w_phi0*phi0 + <W1, Phi1> + <W2, Phi2>.

    Returns raw-parameter gradients for latent means/variances, inducing
    inputs, sigma_h_sq and the ARD weights.
    """
    n, q = means.shape
    w = kernel.weights
    P1 = W1 * phi1                       # (n, m)
    Q = W2[None, :, :] * T               # (n, m, m)

    d_means = np.zeros((n, q))
    d_vars = np.zeros((n, q))
    d_Z = np.zeros_like(Z)
    d_w = np.zeros(q)
    for j in range(q):
        d = means[:, j, None] - Z[None, :, j]
        gam = w[j] * variances[:, j] + 1.0
        inv_gam = 1.0 / gam[:, None]
        # Phi1 contributions
        d_means[:, j] += np.sum(P1 * (-w[j] * d * inv_gam), axis=1)
        d_Z[:, j] += np.sum(P1 * (w[j] * d * inv_gam), axis=0)
        d_vars[:, j] += np.sum(
            P1 * (0.5 * w[j] ** 2 * d * d * inv_gam ** 2 - 0.5 * w[j] * inv_gam),
            axis=1)
        d_w[j] += np.sum(P1 * (-0.5 * d * d * inv_gam
                               + 0.5 * w[j] * d * d * variances[:, j, None] * inv_gam ** 2
                               - 0.5 * variances[:, j, None] * inv_gam))
        # Phi2 contributions
        delta = Z[:, j, None] - Z[None, :, j]
        zbar = 0.5 * (Z[:, j, None] + Z[None, :, j])
        rho = 2.0 * w[j] * variances[:, j] + 1.0
        inv_rho = 1.0 / rho[:, None, None]
        md = means[:, j, None, None] - zbar[None, :, :]
        d_means[:, j] += np.sum(Q * (-2.0 * w[j] * md * inv_rho), axis=(1, 2))
        d_vars[:, j] += np.sum(
            Q * (2.0 * w[j] ** 2 * md * md * inv_rho ** 2 - w[j] * inv_rho),
            axis=(1, 2))
        sv = variances[:, j, None, None]
        d_w[j] += np.sum(Q * (-0.25 * (delta * delta)[None, :, :]
                              - md * md * inv_rho
                              + 2.0 * w[j] * md * md * sv * inv_rho ** 2
                              - sv * inv_rho))
        # both slots of the symmetric pair contribute to each inducing point
        d_Z[:, j] += 2.0 * np.sum(
            Q * (-0.5 * w[j] * delta[None, :, :] + w[j] * md * inv_rho),
            axis=(0, 2))
    d_sigma = (np.sum(P1) + 2.0 * np.sum(Q)) / kernel.sigma_h_sq + n * w_phi0
    return {
        "latent_means": d_means,
        "latent_vars": d_vars,
        "Hu": d_Z,
        "sigma_h_sq": d_sigma,
        "weights": d_w,
    }


# ---------------------------------------------------------------------------
# Collapsed variational bound for one layer
# ---------------------------------------------------------------------------

@dataclass
class _LayerCache:
    kernel: ARDParams
    beta: float
    means: np.ndarray
    variances: np.ndarray
    Z: np.ndarray
    out_means: np.ndarray
    out_vars: np.ndarray      # or None
    phi1: np.ndarray
    T: np.ndarray
    phi2: np.ndarray
    Kuu: np.ndarray
    Kuu_gram: np.ndarray
    L_K: np.ndarray
    P2w: np.ndarray           # Lk^-1 Phi2 Lk^-T
    Kuu_inv: np.ndarray
    A_inv: np.ndarray
    M: np.ndarray             # Phi1^T @ out_means
    AinvM: np.ndarray
    djit: np.ndarray          # d(jitter)/d(Kuu_gram), or None
    value: float


def layer_bound(kernel: ARDParams, beta: float, latent: VariationalLatent,
                Hu, out_means, out_vars=None, return_cache=False):
    """Collapsed variational bound of one sparse layer.

    ``out_means`` are the layer outputs (observed data, or the means of the
    next latent); ``out_vars`` are their variances when the outputs are
    themselves uncertain (None for observed data).  The bound is

        nu * [n/2 log(beta/2pi) + 1/2 log|Kuu| - 1/2 log|A|]
        - beta/2 (||out_means||^2 + sum out_vars + nu*phi0)
        + beta*nu/2 tr(Kuu^-1 Phi2) + beta^2/2 tr(M^T A^-1 M)

    with A = Kuu + beta*Phi2 and M = Phi1^T out_means.
    """
    Hu = np.atleast_2d(np.asarray(Hu, dtype=float))
    out_means = np.atleast_2d(np.asarray(out_means, dtype=float))
    n, nu = out_means.shape
    m = Hu.shape[0]
    if n != latent.n:
        raise DimensionMismatchError("layer outputs rows", latent.n, n)
    phi0, phi1, T, phi2 = _phi_forward(kernel, latent.means, latent.variances, Hu)
    Kuu_gram = gram(Hu, Hu, kernel)
    L_K, Kuu, djit = _chol_conditioned(Kuu_gram, KUU_JITTER * kernel.sigma_h_sq)
    # whitened inner matrix I + beta * Lk^-1 Phi2 Lk^-T: well conditioned by
    # construction, so the quadratic data-fit term stays accurate even when
    # Kuu + beta*Phi2 itself is numerically singular
    half = scipy.linalg.solve_triangular(L_K, phi2, lower=True)
    P2w = scipy.linalg.solve_triangular(L_K, half.T, lower=True)
    P2w = 0.5 * (P2w + P2w.T)
    Aw = beta * P2w
    Aw[np.diag_indices_from(Aw)] += 1.0
    try:
        L_Aw = np.linalg.cholesky(Aw)
    except np.linalg.LinAlgError:
        # beta large enough to promote roundoff negatives in P2w past the
        # unit floor; clip to the PSD cone and retry
        evals, vecs = np.linalg.eigh(P2w)
        P2w = (vecs * np.clip(evals, 0.0, None)[None, :]) @ vecs.T
        Aw = beta * P2w
        Aw[np.diag_indices_from(Aw)] += 1.0
        L_Aw = np.linalg.cholesky(Aw)
    Lk_inv = scipy.linalg.solve_triangular(L_K, np.eye(m), lower=True)
    Aw_inv = scipy.linalg.cho_solve((L_Aw, True), np.eye(m))
    Kuu_inv = Lk_inv.T @ Lk_inv
    A_inv = Lk_inv.T @ Aw_inv @ Lk_inv
    A_inv = 0.5 * (A_inv + A_inv.T)
    M = phi1.T @ out_means
    Mw = scipy.linalg.solve_triangular(L_K, M, lower=True)
    AwinvMw = scipy.linalg.cho_solve((L_Aw, True), Mw)
    AinvM = scipy.linalg.solve_triangular(L_K, AwinvMw, lower=True, trans=1)

    logdet_Aw = 2.0 * float(np.sum(np.log(np.diag(L_Aw))))
    sum_sq = float(np.sum(out_means * out_means))
    sum_vars = float(np.sum(out_vars)) if out_vars is not None else 0.0
    value = (nu * 0.5 * n * (np.log(beta) - LOG_2PI)
             - nu * 0.5 * logdet_Aw
             - 0.5 * beta * (sum_sq + sum_vars + nu * phi0)
             + 0.5 * beta * nu * float(np.trace(P2w))
             + 0.5 * beta ** 2 * float(np.sum(Mw * AwinvMw)))
    if not return_cache:
        return value
    cache = _LayerCache(kernel=kernel, beta=beta, means=latent.means,
                        variances=latent.variances, Z=Hu, out_means=out_means,
                        out_vars=out_vars, phi1=phi1, T=T, phi2=phi2, Kuu=Kuu,
                        Kuu_gram=Kuu_gram, L_K=L_K, P2w=P2w, Kuu_inv=Kuu_inv,
                        A_inv=A_inv, M=M, AinvM=AinvM, djit=djit, value=value)
    return value, cache


def layer_bound_grads(cache: _LayerCache):
    """Exact gradients of :func:`layer_bound` w.r.t. every input block.

    Raw-parameter gradients; keys: latent_means, latent_vars, Hu,
    sigma_h_sq, weights, beta, out_means, out_vars (None when the outputs
    are observed).
    """
    beta = cache.beta
    nu = cache.out_means.shape[1]
    n = cache.out_means.shape[0]
    kern = cache.kernel

    W_A = -0.5 * nu * cache.A_inv - 0.5 * beta ** 2 * (cache.AinvM @ cache.AinvM.T)
    KiP2Ki = cache.Kuu_inv @ cache.phi2 @ cache.Kuu_inv
    W_phi2 = beta * W_A + 0.5 * beta * nu * cache.Kuu_inv
    W_phi1 = beta ** 2 * cache.out_means @ cache.AinvM.T
    W_Kuu = 0.5 * nu * cache.Kuu_inv + W_A - 0.5 * beta * nu * KiP2Ki
    w_phi0 = -0.5 * beta * nu

    g = _phi_backward(kern, cache.means, cache.variances, cache.Z,
                      cache.phi1, cache.T, W_phi1, W_phi2, w_phi0)

    # add K_uu contributions (ARD kernel on the inducing inputs); when the
    # spectral jitter branch is active the gram sensitivity picks up the
    # jitter's own derivative so gradients stay consistent with the value
    WK = 0.5 * (W_Kuu + W_Kuu.T)
    E = WK if cache.djit is None else WK + float(np.trace(WK)) * cache.djit
    PK = E * cache.Kuu_gram
    w = kern.weights
    for j in range(cache.Z.shape[1]):
        delta = cache.Z[:, j, None] - cache.Z[None, :, j]
        g["Hu"][:, j] += -2.0 * w[j] * np.sum(PK * delta, axis=1)
        g["weights"][j] += -0.5 * np.sum(PK * delta * delta)
    g["sigma_h_sq"] += float(np.sum(WK * cache.Kuu)) / kern.sigma_h_sq

    sum_sq = float(np.sum(cache.out_means ** 2))
    sum_vars = float(np.sum(cache.out_vars)) if cache.out_vars is not None else 0.0
    tr_AinvPhi2 = float(np.sum(cache.A_inv * cache.phi2))
    tr_KinvPhi2 = float(np.sum(cache.Kuu_inv * cache.phi2))
    tr_MAM = float(np.sum(cache.M * cache.AinvM))
    phi0 = n * kern.sigma_h_sq
    g["beta"] = (0.5 * nu * n / beta
                 - 0.5 * nu * tr_AinvPhi2
                 - 0.5 * (sum_sq + sum_vars + nu * phi0)
                 + 0.5 * nu * tr_KinvPhi2
                 + beta * tr_MAM
                 - 0.5 * beta ** 2 * float(np.sum(cache.AinvM * (cache.phi2 @ cache.AinvM))))
    g["out_means"] = -beta * cache.out_means + beta ** 2 * cache.phi1 @ cache.AinvM
    g["out_vars"] = (np.full_like(cache.out_vars, -0.5 * beta)
                     if cache.out_vars is not None else None)
    return g


# ---------------------------------------------------------------------------
# Stand-alone GP-LVM: standard-normal latent prior
# ---------------------------------------------------------------------------

def latent_kl(latent: VariationalLatent) -> float:
    """KL(q(H) || N(0, I)) for a factorized Gaussian."""
    mu, S = latent.means, latent.variances
    return float(0.5 * np.sum(mu * mu + S - np.log(S)) - 0.5 * mu.size)


def elbo_layer(state: LayerState, Y, include_kl=True) -> float:
    """GP-LVM evidence lower bound: collapsed data term minus latent KL.

    ``include_kl=False`` returns the data term alone, which is the quantity
    that becomes tight against the exact GP log marginal when the latent
    variances vanish and the inducing set equals the latent means.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    value = layer_bound(state.kernel, state.beta, state.latent,
                        state.inducing.inputs, Y)
    if include_kl:
        value -= latent_kl(state.latent)
    return value


def _elbo_value_and_grad(state: LayerState, Y):
    """One-forward-pass evaluation of the ELBO and its gradients."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if state.reparam is None:
        S = state.latent.variances
        if np.any(S >= 1.0):
            raise ValueError("cannot derive reparam: latent variances must be < 1")
        state = replace(state, reparam=Reparam(mu_bar=state.latent.means.copy(),
                                               lam=1.0 / S - 1.0))
    _, cache = layer_bound(state.kernel, state.beta, state.latent,
                           state.inducing.inputs, Y, return_cache=True)
    value = cache.value - latent_kl(state.latent)
    g = layer_bound_grads(cache)
    S = state.latent.variances
    d_means = g["latent_means"] - state.latent.means        # KL: d/dmu = mu
    d_S = g["latent_vars"] - 0.5 * (1.0 - 1.0 / S)          # KL: d/dS
    out = {
        "mu_bar": d_means,
        "lam": -S * S * d_S,
        "Hu": g["Hu"],
        "sigma_h_sq": g["sigma_h_sq"],
        "weights": g["weights"],
        "beta": g["beta"],
    }
    for key, val in out.items():
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"non-finite gradient in block '{key}'")
    return value, out


def elbo_grad(state: LayerState, Y):
    """Analytic ELBO gradients in the (mu_bar, lam) parameterization.

    Returns a dict with blocks ``mu_bar, lam, Hu, sigma_h_sq, weights,
    beta`` (raw-parameter gradients).  Requires ``state.reparam``; with the
    standard-normal prior the latent moments are means = mu_bar and
    variances = 1/(1 + lam).
    """
    return _elbo_value_and_grad(state, Y)[1]


def recover_inducing_posterior(state: LayerState, Y) -> InducingSet:
    """Explicit optimal q(U) moments implied by the collapsed bound."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    _, cache = layer_bound(state.kernel, state.beta, state.latent,
                           state.inducing.inputs, Y, return_cache=True)
    Sigma = cache.Kuu @ cache.A_inv @ cache.Kuu
    Sigma = 0.5 * (Sigma + Sigma.T)
    nu_means = state.beta * cache.Kuu @ cache.AinvM
    nu = Y.shape[1]
    return InducingSet(inputs=state.inducing.inputs.copy(),
                       out_means=nu_means,
                       out_covs=np.repeat(Sigma[None, :, :], nu, axis=0))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _pca_latent(Y, q, rng):
    """Principal-component projection of Y to q dims, unit-scaled.

    One global scale factor (leading component std -> 1) so the relative
    magnitudes of the components survive; per-dimension relevance is then
    visible to the ARD weights from the start.
    """
    Yc = Y - Y.mean(axis=0)
    U, s, _ = np.linalg.svd(Yc, full_matrices=False)
    scores = U[:, :q] * s[:q]
    if scores.shape[1] < q:
        pad = rng.standard_normal((Y.shape[0], q - scores.shape[1])) * 1e-3
        scores = np.hstack([scores, pad])
    scale = scores[:, 0].std()
    if scale < 1e-12:
        scale = 1.0
    scores = scores / scale
    # deterministic sign: largest-magnitude score positive
    for k in range(q):
        j = np.argmax(np.abs(scores[:, k]))
        if scores[j, k] < 0:
            scores[:, k] = -scores[:, k]
    return scores


def _pack(mu_bar, lam, Z, kernel, beta):
    return np.concatenate([mu_bar.ravel(), np.log(lam).ravel(), Z.ravel(),
                           [np.log(kernel.sigma_h_sq)], np.log(kernel.weights),
                           [np.log(beta)]])


def _unpack(x, n, q, m):
    i = 0
    mu_bar = x[i:i + n * q].reshape(n, q); i += n * q
    lam = np.exp(x[i:i + n * q]).reshape(n, q); i += n * q
    Z = x[i:i + m * q].reshape(m, q); i += m * q
    sigma = float(np.exp(x[i])); i += 1
    w = np.exp(x[i:i + q]); i += q
    beta = float(np.exp(x[i]))
    return mu_bar, lam, Z, ARDParams(sigma_h_sq=sigma, weights=w), beta


def train_gplvm(Y, q, m, iters=200, seed=0):
    """Train a Bayesian GP-LVM on data Y.

    Returns ``(state, trace)`` where ``state`` carries the optimized kernel,
    noise precision, variational posterior q(H) and inducing set (with the
    recovered q(U) moments), and ``trace`` is the nondecreasing ELBO history.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, nu = Y.shape
    if not 1 <= q <= nu:
        raise ValueError(f"latent dimension must satisfy 1 <= q <= {nu}, got {q}")
    if not 1 <= m <= n:
        raise ValueError(f"inducing count must satisfy 1 <= m <= {n}, got {m}")
    y_var = float(np.var(Y))
    if y_var <= 0.0:
        raise ValueError("Y has zero variance; nothing to model")

    rng = rng_for(seed)
    mu0 = _pca_latent(Y, q, rng)
    lam0 = np.full((n, q), 9.0)          # latent variances start at 0.1
    idx = rng.choice(n, size=m, replace=False)
    Z0 = mu0[np.sort(idx)].copy()
    kern0 = ARDParams(sigma_h_sq=y_var, weights=np.ones(q))
    beta0 = 100.0 / y_var

    def make_value_and_grad(freeze_beta):
        def value_and_grad(x, need_grad=True):
            try:
                mu_bar, lam, Z, kern, beta = _unpack(x, n, q, m)
                state = LayerState.from_reparam(kern, beta, Reparam(mu_bar, lam),
                                                InducingSet(inputs=Z))
                if not need_grad:
                    return elbo_layer(state, Y), None
                f, g = _elbo_value_and_grad(state, Y)
            except (np.linalg.LinAlgError, FloatingPointError, ValueError):
                return -np.inf, None
            grad = np.concatenate([
                g["mu_bar"].ravel(),
                (g["lam"] * lam).ravel(),               # chain to log lam
                g["Hu"].ravel(),
                [g["sigma_h_sq"] * kern.sigma_h_sq],
                g["weights"] * kern.weights,
                [0.0 if freeze_beta else g["beta"] * beta],
            ])
            return f, grad
        return value_and_grad

    # hold the noise precision for the first stretch so it cannot swallow
    # the signal before the latent space has organized
    x0 = _pack(mu0, lam0, Z0, kern0, beta0)
    warm = min(50, int(iters) // 3)
    x, trace_a = ascend(make_value_and_grad(True), x0, warm)
    x, trace_b = ascend(make_value_and_grad(False), x, int(iters) - warm)
    trace = np.concatenate([trace_a, trace_b[1:]])
    mu_bar, lam, Z, kern, beta = _unpack(x, n, q, m)
    state = LayerState.from_reparam(kern, beta, Reparam(mu_bar, lam),
                                    InducingSet(inputs=Z))
    state.inducing = recover_inducing_posterior(state, Y)
    return state, trace


def effective_dims(kernel: ARDParams, threshold_frac=0.01):
    """Indices of latent coordinates whose ARD weight clears the threshold."""
    if not 0.0 < threshold_frac < 1.0:
        raise ValueError("threshold_frac must lie in (0, 1)")
    w = kernel.weights
    w_max = float(np.max(w))
    if w_max <= 0.0:
        raise ValueError("all ARD weights are zero")
    return sorted(int(k) for k in np.nonzero(w >= threshold_frac * w_max)[0])
