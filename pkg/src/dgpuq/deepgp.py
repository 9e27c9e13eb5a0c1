"""Supervised deep Gaussian process: stacked variational GP layers.

Structure: observed inputs X map to the first latent through an exact GP
(no inducing points; that conditional is a tractable Gaussian), and each
subsequent latent maps through a sparse collapsed layer from
:mod:`dgpuq.gplvm`.  With G latents h_1..h_G the mappings are

    X -> h_1 -> h_2 -> ... -> h_G -> Y.

The first latent keeps a full n x n posterior covariance per column,
parameterized as S_j = (C^-1 + diag(lam_j))^-1 and mean column C mu_bar_j
with C the input-layer prior covariance; deeper latents are factorized.
Training is two-phase: a greedy stack of GP-LVMs initializes every layer,
then the joint bound (first-layer KL + collapsed layer terms + entropies)
is refined by gradient ascent.  Prediction propagates Gaussian moments
layer to layer using the test-point kernel expectations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .kernels import RBFParams, ARDParams, gram, chol_psd, DimensionMismatchError
from .gplvm import (LayerState, VariationalLatent, InducingSet, KUU_JITTER,
                    layer_bound, layer_bound_grads, train_gplvm, _phi_forward,
                    recover_inducing_posterior)
from .optimize import ascend
from . import gp as gp_mod
from .rng import rng_for

__all__ = [
    "InputLayer",
    "DeepGPModel",
    "PsiStats",
    "train_deep",
    "elbo",
    "elbo_grad_vector",
    "pack_params",
    "unpack_params",
    "predict_layer1",
    "psi_stats",
    "propagate",
    "predict",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class InputLayer:
    """Exact-GP mapping from observed inputs to the first latent."""

    kernel: RBFParams
    noise_var: float
    mu_bar: np.ndarray   # (n, q1)
    lam: np.ndarray      # (n, q1), positive


@dataclass(frozen=True)
class PsiStats:
    """Test-point kernel expectations under q(h*)."""

    psi0: float          # n* * sigma_h_sq
    psi1: np.ndarray     # (m, n*)
    psi2: np.ndarray     # (m, m), summed over test points


@dataclass
class DeepGPModel:
    """Trained deep GP: input layer plus an ordered stack of sparse layers.

    ``hidden_layers[t]`` maps latent t+1 to latent t+2 (the last one maps
    to the observed outputs); its ``latent`` field holds q of its input.
    """

    X: np.ndarray
    Y: np.ndarray
    input_layer: InputLayer
    hidden_layers: list
    dims: list
    training_meta: dict = field(default_factory=dict)
    _pred_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_latents(self):
        return len(self.hidden_layers)


# ---------------------------------------------------------------------------
# Joint bound
# ---------------------------------------------------------------------------

def _input_cov(input_layer: InputLayer, X):
    C = gram(X, X, input_layer.kernel) + input_layer.noise_var * np.eye(X.shape[0])
    L_C, _ = chol_psd(C)
    return C, L_C


def _first_latent_forward(input_layer: InputLayer, C, need_full=False):
    """Moments of the first latent and the per-column KL to its prior.

    Returns (M1, diag_S, kl, cols) where cols caches per-column factors for
    the backward pass when ``need_full`` is set.
    """
    n, q1 = input_layer.mu_bar.shape
    M1 = C @ input_layer.mu_bar
    diag_S = np.empty((n, q1))
    kl = 0.0
    cols = [] if need_full else None
    diag_C = np.diag(C)
    for j in range(q1):
        lam_j = input_layer.lam[:, j]
        w = np.sqrt(lam_j)
        B = w[:, None] * C * w[None, :]
        B[np.diag_indices_from(B)] += 1.0
        L_B = np.linalg.cholesky(B)
        V = scipy.linalg.solve_triangular(L_B, w[:, None] * C, lower=True)
        dS = diag_C - np.sum(V * V, axis=0)
        np.maximum(dS, 1e-300, out=dS)
        diag_S[:, j] = dS
        logdet_B = 2.0 * float(np.sum(np.log(np.diag(L_B))))
        kl += 0.5 * (float(input_layer.mu_bar[:, j] @ M1[:, j])
                     - float(lam_j @ dS) + logdet_B)
        if need_full:
            cols.append((w, L_B, V))
    return M1, diag_S, kl, cols


def elbo(model: DeepGPModel) -> float:
    """Joint variational lower bound of the deep model."""
    return _deep_value_and_grad(model, need_grad=False)[0]


def _deep_value_and_grad(model: DeepGPModel, need_grad=True):
    X, Y = model.X, model.Y
    G = model.n_latents
    C, _ = _input_cov(model.input_layer, X)
    M1, diag_S1, kl1, cols = _first_latent_forward(model.input_layer, C,
                                                   need_full=need_grad)
    model.hidden_layers[0].latent = VariationalLatent(means=M1, variances=diag_S1)

    value = -kl1
    caches = []
    for t in range(G):
        layer = model.hidden_layers[t]
        if t < G - 1:
            nxt = model.hidden_layers[t + 1].latent
            out_means, out_vars = nxt.means, nxt.variances
        else:
            out_means, out_vars = Y, None
        v, cache = layer_bound(layer.kernel, layer.beta, layer.latent,
                               layer.inducing.inputs, out_means, out_vars,
                               return_cache=True)
        value += v
        caches.append(cache)
    for t in range(1, G):
        S = model.hidden_layers[t].latent.variances
        value += 0.5 * float(np.sum(np.log(S))) + 0.5 * S.size * (1.0 + LOG_2PI)

    if not need_grad:
        return value, None

    grads = [layer_bound_grads(c) for c in caches]

    # free hidden latents: input of layer t, output of layer t-1, plus entropy
    latent_blocks = []
    for t in range(1, G):
        S = model.hidden_layers[t].latent.variances
        d_means = grads[t]["latent_means"] + grads[t - 1]["out_means"]
        d_vars = grads[t]["latent_vars"] + grads[t - 1]["out_vars"] + 0.5 / S
        latent_blocks.append({"means": d_means, "log_vars": d_vars * S})

    layer_blocks = []
    for t in range(G):
        layer = model.hidden_layers[t]
        g = grads[t]
        layer_blocks.append({
            "Hu": g["Hu"],
            "log_sigma_h": g["sigma_h_sq"] * layer.kernel.sigma_h_sq,
            "log_w": g["weights"] * layer.kernel.weights,
            "log_beta": g["beta"] * layer.beta,
        })

    # input layer: chain through M1 = C mu_bar, diag S_j and the first KL
    il = model.input_layer
    n, q1 = il.mu_bar.shape
    d_M1 = grads[0]["latent_means"]
    d_s1 = grads[0]["latent_vars"]
    d_mu_bar = C @ (d_M1 - il.mu_bar)
    d_log_lam = np.empty((n, q1))
    G_C = d_M1 @ il.mu_bar.T - 0.5 * il.mu_bar @ il.mu_bar.T
    for j in range(q1):
        w, L_B, V = cols[j]
        lam_j = il.lam[:, j]
        S_full = C - V.T @ V
        SS = S_full * S_full
        d_lam = -(SS @ (d_s1[:, j] + 0.5 * lam_j))
        d_log_lam[:, j] = d_lam * lam_j
        # C^-1 S = I - diag(w) B^-1 diag(w) C,   C^-1 - C^-1 S C^-1 = W B^-1 W
        BinvWC = scipy.linalg.solve_triangular(L_B, V, lower=True, trans=1)
        CinvS = -w[:, None] * BinvWC
        CinvS[np.diag_indices_from(CinvS)] += 1.0
        F = scipy.linalg.solve_triangular(L_B, np.diag(w), lower=True)
        G_C += (CinvS * (d_s1[:, j] + 0.5 * lam_j)[None, :]) @ CinvS.T
        G_C -= 0.5 * F.T @ F
    Kx = gram(X, X, il.kernel)
    P = G_C * Kx
    g_log_tau = float(np.sum(P))
    row = P.sum(axis=1)
    colsum = P.sum(axis=0)
    quad = np.einsum("ik,ij,jk->k", X, P, X, optimize=True)
    sq = X * X
    g_log_b = -il.kernel.lengthscale_inv * (sq.T @ row + sq.T @ colsum - 2.0 * quad)
    g_log_noise = il.noise_var * float(np.trace(G_C))
    input_block = {"log_tau0": g_log_tau, "log_b": g_log_b,
                   "log_noise": g_log_noise, "mu_bar": d_mu_bar,
                   "log_lam": d_log_lam}
    return value, {"input": input_block, "layers": layer_blocks,
                   "latents": latent_blocks}


# ---------------------------------------------------------------------------
# Parameter vector packing (unconstrained optimization space)
# ---------------------------------------------------------------------------

def pack_params(model: DeepGPModel, frozen_input=False) -> np.ndarray:
    il = model.input_layer
    parts = []
    if not frozen_input:
        parts += [[np.log(il.kernel.tau0_sq)], np.log(il.kernel.lengthscale_inv),
                  [np.log(il.noise_var)], il.mu_bar.ravel(), np.log(il.lam).ravel()]
    for layer in model.hidden_layers:
        parts += [layer.inducing.inputs.ravel(), [np.log(layer.kernel.sigma_h_sq)],
                  np.log(layer.kernel.weights), [np.log(layer.beta)]]
    for t in range(1, model.n_latents):
        lat = model.hidden_layers[t].latent
        parts += [lat.means.ravel(), np.log(lat.variances).ravel()]
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def unpack_params(model: DeepGPModel, x, frozen_input=False) -> DeepGPModel:
    """Rebuild a model with parameters taken from the packed vector."""
    i = 0

    def take(k):
        nonlocal i
        out = x[i:i + k]
        i += k
        return out

    il = model.input_layer
    if frozen_input:
        new_il = il
    else:
        kappa = il.kernel.dim
        tau = float(np.exp(take(1)[0]))
        b = np.exp(take(kappa))
        nv = float(np.exp(take(1)[0]))
        n, q1 = il.mu_bar.shape
        mu_bar = take(n * q1).reshape(n, q1).copy()
        lam = np.exp(take(n * q1)).reshape(n, q1)
        new_il = InputLayer(kernel=RBFParams(tau0_sq=tau, lengthscale_inv=b),
                            noise_var=nv, mu_bar=mu_bar, lam=lam)
    new_layers = []
    for layer in model.hidden_layers:
        m, q = layer.inducing.inputs.shape
        Z = take(m * q).reshape(m, q).copy()
        sig = float(np.exp(take(1)[0]))
        w = np.exp(take(q))
        beta = float(np.exp(take(1)[0]))
        new_layers.append(LayerState(
            kernel=ARDParams(sigma_h_sq=sig, weights=w), beta=beta,
            latent=layer.latent, inducing=InducingSet(inputs=Z)))
    for t in range(1, model.n_latents):
        n, q = model.hidden_layers[t].latent.means.shape
        means = take(n * q).reshape(n, q).copy()
        variances = np.exp(take(n * q)).reshape(n, q)
        new_layers[t].latent = VariationalLatent(means=means, variances=variances)
    if i != x.size:
        raise ValueError(f"parameter vector length mismatch: used {i} of {x.size}")
    return DeepGPModel(X=model.X, Y=model.Y, input_layer=new_il,
                       hidden_layers=new_layers, dims=list(model.dims),
                       training_meta=model.training_meta)


def _grad_to_vector(model: DeepGPModel, g, frozen_input=False) -> np.ndarray:
    parts = []
    if not frozen_input:
        gi = g["input"]
        parts += [[gi["log_tau0"]], gi["log_b"], [gi["log_noise"]],
                  gi["mu_bar"].ravel(), gi["log_lam"].ravel()]
    for gl in g["layers"]:
        parts += [gl["Hu"].ravel(), [gl["log_sigma_h"]], gl["log_w"],
                  [gl["log_beta"]]]
    for gt in g["latents"]:
        parts += [gt["means"].ravel(), gt["log_vars"].ravel()]
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def elbo_grad_vector(model: DeepGPModel, frozen_input=False) -> np.ndarray:
    """Gradient of :func:`elbo` in the packed parameterization."""
    _, g = _deep_value_and_grad(model, need_grad=True)
    return _grad_to_vector(model, g, frozen_input)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_deep(X, Y, dims, m_inducing, iters=100, seed=0, init_iters=150,
               fix_latent_to_inputs=False, callback=None) -> DeepGPModel:
    """Train a deep GP by greedy GP-LVM stacking plus joint refinement.

    Parameters
    ----------
    dims : latent dimensions q_1..q_G (outermost first).
    m_inducing : inducing counts, one per sparse layer.
    iters : accepted steps of the joint phase.
    init_iters : accepted steps for each greedy GP-LVM fit.
    fix_latent_to_inputs : clamp the first latent to X with tiny variances
        and freeze the input layer (requires G = 1 and q_1 = X.shape[1]);
        the joint phase then trains the output mapping only.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatchError("training rows", X.shape[0], Y.shape[0])
    dims = [int(d) for d in dims]
    m_inducing = [int(m) for m in m_inducing]
    G = len(dims)
    if G < 1:
        raise ValueError("need at least one latent layer")
    if len(m_inducing) != G:
        raise ValueError("m_inducing must have one entry per layer")
    n = X.shape[0]
    if float(np.var(Y)) <= 0.0:
        raise ValueError("Y has zero variance; nothing to model")
    if fix_latent_to_inputs and (G != 1 or dims[0] != X.shape[1]):
        raise ValueError("fix_latent_to_inputs requires G = 1 and q1 = input dim")

    # greedy stack: GP-LVM on Y gives the last latent, then work backwards
    init_traces = []
    layers = [None] * G
    latent_means = [None] * (G + 1)    # index i holds q(h_i) moments, 1-based
    latent_vars = [None] * (G + 1)
    data = Y
    for t in range(G - 1, -1, -1):
        if fix_latent_to_inputs:
            state = _sparse_layer_on_fixed_inputs(X, Y, m_inducing[0], seed)
            trace = np.array([])
        else:
            state, trace = train_gplvm(data, dims[t], m_inducing[t],
                                       iters=init_iters, seed=seed + 101 * t)
        init_traces.append(trace)
        layers[t] = state
        latent_means[t + 1] = state.latent.means
        latent_vars[t + 1] = state.latent.variances
        data = state.latent.means

    # hidden layers' free latent moments (inputs of layers 1..G-1)
    for t in range(1, G):
        layers[t].latent = VariationalLatent(means=latent_means[t + 1].copy(),
                                             variances=latent_vars[t + 1].copy())
    # clear reparam fields: the deep parameterization replaces them
    for layer in layers:
        layer.reparam = None

    # input layer: exact-GP fit of X -> first latent means
    if fix_latent_to_inputs:
        M1 = X.copy()
        S1 = np.full_like(M1, 1e-9)
        gpm = gp_mod.fit(X, M1, iters=min(init_iters, 60))
        il_kernel, il_noise = gpm.kernel, gpm.noise_var
    else:
        M1 = latent_means[1]
        S1 = latent_vars[1]
        gpm = gp_mod.fit(X, M1, iters=min(init_iters, 60))
        il_kernel, il_noise = gpm.kernel, gpm.noise_var
    C = gram(X, X, il_kernel) + il_noise * np.eye(n)
    L_C, _ = chol_psd(C)
    mu_bar = scipy.linalg.cho_solve((L_C, True), M1)
    lam = 1.0 / np.clip(S1, 1e-12, None)
    input_layer = InputLayer(kernel=il_kernel, noise_var=il_noise,
                             mu_bar=mu_bar, lam=lam)

    model = DeepGPModel(X=X, Y=Y, input_layer=input_layer, hidden_layers=layers,
                        dims=dims, training_meta={"seed": int(seed),
                                                  "iters": int(iters),
                                                  "init_iters": int(init_iters)})
    frozen = bool(fix_latent_to_inputs)

    def value_and_grad(x, need_grad=True):
        try:
            cand = unpack_params(model, x, frozen_input=frozen)
            value, g = _deep_value_and_grad(cand, need_grad=need_grad)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return -np.inf, None
        if not need_grad:
            return value, None
        return value, _grad_to_vector(cand, g, frozen_input=frozen)

    x0 = pack_params(model, frozen_input=frozen)
    x, trace = ascend(value_and_grad, x0, iters, callback=callback)
    trained = unpack_params(model, x, frozen_input=frozen)
    _deep_value_and_grad(trained, need_grad=False)  # sync first-latent moments
    trained.training_meta.update({
        "elbo_trace": trace,
        "final_elbo": float(trace[-1]),
        "init_traces": init_traces,
    })
    return trained


def _sparse_layer_on_fixed_inputs(X, Y, m, seed) -> LayerState:
    """Sparse output layer whose latent is clamped to the observed inputs."""
    n, q = X.shape
    latent = VariationalLatent(means=X.copy(), variances=np.full((n, q), 1e-9))
    rng = rng_for(seed, 7)
    idx = np.sort(rng.choice(n, size=min(m, n), replace=False))
    y_var = float(np.var(Y))
    span = np.maximum(X.max(axis=0) - X.min(axis=0), 1e-3)
    kern = ARDParams(sigma_h_sq=y_var, weights=2.0 / span ** 2)
    return LayerState(kernel=kern, beta=100.0 / y_var, latent=latent,
                      inducing=InducingSet(inputs=X[idx].copy()))


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict_layer1(model: DeepGPModel, Xstar):
    """Exact-GP predictive moments of the first latent at new inputs."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    il = model.input_layer
    if Xstar.shape[1] != model.X.shape[1]:
        raise DimensionMismatchError("predict_layer1 columns", model.X.shape[1],
                                     Xstar.shape[1])
    key = "layer1"
    if key not in model._pred_cache:
        C, L_C = _input_cov(il, model.X)
        M1 = C @ il.mu_bar
        model._pred_cache[key] = (L_C, M1)
    L_C, M1 = model._pred_cache[key]
    Ks = gram(model.X, Xstar, il.kernel)
    Kss = gram(Xstar, Xstar, il.kernel)
    alpha = scipy.linalg.cho_solve((L_C, True), M1)
    mean = Ks.T @ alpha
    v = scipy.linalg.solve_triangular(L_C, Ks, lower=True)
    cov = Kss - v.T @ v
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def psi_stats(kernel: ARDParams, qh_star: VariationalLatent, Hu) -> PsiStats:
    """Closed-form test-point kernel expectations (summed over test rows)."""
    Hu = np.atleast_2d(np.asarray(Hu, dtype=float))
    if Hu.shape[1] != qh_star.q:
        raise DimensionMismatchError("psi_stats inducing inputs", qh_star.q,
                                     Hu.shape[1])
    phi0, phi1, _, phi2 = _phi_forward(kernel, qh_star.means,
                                       qh_star.variances, Hu)
    return PsiStats(psi0=phi0, psi1=phi1.T, psi2=phi2)


def _layer_pred_cache(model: DeepGPModel, t):
    key = ("layer", t)
    if key in model._pred_cache:
        return model._pred_cache[key]
    layer = model.hidden_layers[t]
    if t < model.n_latents - 1:
        out_means = model.hidden_layers[t + 1].latent.means
    else:
        out_means = model.Y
    _, cache = layer_bound(layer.kernel, layer.beta, layer.latent,
                           layer.inducing.inputs, out_means,
                           return_cache=True)
    V = layer.beta * cache.AinvM                     # (m, nu)
    Dmat = cache.Kuu_inv - cache.A_inv               # PSD: posterior shrinkage
    entry = {"V": V, "Dmat": Dmat, "Kuu_inv": cache.Kuu_inv,
             "A_inv": cache.A_inv, "Z": layer.inducing.inputs,
             "kernel": layer.kernel, "beta": layer.beta}
    model._pred_cache[key] = entry
    return entry


def propagate(model: DeepGPModel, layer_index: int, qh_prev_star,
              include_noise=True):
    """Push Gaussian moments through hidden layer ``layer_index``.

    ``qh_prev_star`` is ``(means, variances)`` of the layer input at the
    test points (factorized per point and dimension).  Returns the
    factorized moments of the layer output, including the layer noise
    variance when ``include_noise`` is set.
    """
    means, variances = qh_prev_star
    means = np.atleast_2d(np.asarray(means, dtype=float))
    variances = np.atleast_2d(np.asarray(variances, dtype=float))
    cache = _layer_pred_cache(model, layer_index)
    kern, V, Dmat = cache["kernel"], cache["V"], cache["Dmat"]
    _, psi1, T, _ = _phi_forward(kern, means, np.clip(variances, 1e-300, None),
                                 cache["Z"])
    mean = psi1 @ V                                             # (n*, nu)
    tr_term = np.einsum("tkl,kl->t", T, Dmat)                   # (n*,)
    quad = np.einsum("tkl,kj,lj->tj", T, V, V)                  # (n*, nu)
    proj = mean * mean
    var = kern.sigma_h_sq - tr_term[:, None] + quad - proj
    np.maximum(var, 0.0, out=var)
    if include_noise:
        var = var + 1.0 / cache["beta"]
    return mean, var


def predict(model: DeepGPModel, Xstar):
    """Predictive mean and variance of the outputs at new inputs.

    Chains the exact first-layer predictive with moment propagation through
    every sparse layer; deterministic given the model (no sampling).
    """
    mean1, cov1 = predict_layer1(model, Xstar)
    q1 = mean1.shape[1]
    v1 = np.clip(np.diag(cov1), 0.0, None) + model.input_layer.noise_var
    moments = (mean1, np.repeat(v1[:, None], q1, axis=1))
    for t in range(model.n_latents):
        moments = propagate(model, t, moments)
    return moments
