"""Monte Carlo uncertainty propagation through a trained deep GP.

One "realization" pushes a fresh sample of input fields through a random
draw of every layer: the first layer's values are drawn jointly from its
predictive Gaussian, each later layer draws function values from its
variational predictive conditioned on the drawn inputs, and the mapping is
then represented by the noise-free conditioning of those drawn values (so
re-evaluating at the same points returns the draw itself).  Repeating the
whole process gives samples of the Monte Carlo mean/variance estimators,
from which the mean-of-mean, mean-of-variance, error bars and pointwise
density estimates are assembled.  A plain Monte Carlo loop over the actual
simulator provides the ground-truth reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .kernels import gram, chol_psd, SingularMatrixError
from .random_field import Grid2D, KLExpansion, permeability
from .deepgp import DeepGPModel, predict_layer1, _layer_pred_cache
from .rng import rng_for

__all__ = [
    "InputDistribution",
    "PdfEstimate",
    "UQReport",
    "sample_inputs",
    "propagate_realization",
    "mean_estimate",
    "var_estimate",
    "uq_report",
    "mc_baseline",
    "kde_curve",
]

PDF_GRID_SIZE = 256


@dataclass
class InputDistribution:
    """Uniform coefficients mapped through the KL basis to permeability fields."""

    kle: KLExpansion
    kind: str = "kle-uniform"

    def __post_init__(self):
        if self.kind != "kle-uniform":
            raise ValueError(f"unsupported input distribution kind: {self.kind}")

    @property
    def k_xi(self):
        return self.kle.k_xi


@dataclass(frozen=True)
class PdfEstimate:
    """Pointwise density estimate with a spread band across repeats."""

    location: tuple
    column: int
    abscissae: np.ndarray
    mean_density: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass
class UQReport:
    mean_of_mean: np.ndarray
    mean_of_variance: np.ndarray
    errorbar_mean: np.ndarray
    errorbar_variance: np.ndarray
    n_inner: int
    n_repeats: int
    pdf_points: list = field(default_factory=list)


def sample_inputs(dist: InputDistribution, n_prime: int, seed: int) -> np.ndarray:
    """Draw permeability-field realizations, one per row."""
    if n_prime < 2:
        raise ValueError("need at least two input samples")
    rng = rng_for(seed)
    xi = rng.uniform(size=(n_prime, dist.k_xi))
    np.clip(xi, 1e-15, 1.0 - 1e-15, out=xi)
    return np.vstack([permeability(dist.kle, row) for row in xi])


def _draw_gaussian(mean, cov, rng):
    """Joint draw of one column set: mean (n, d) + chol(cov) @ N(0,1).

    Near-degenerate covariances (roundoff-negative eigenvalues) fall back
    to drawing from the positive part of the spectrum.
    """
    z = rng.standard_normal(mean.shape)
    if np.max(np.abs(cov)) == 0.0:
        return mean.copy()
    try:
        L, _ = chol_psd(cov)
    except SingularMatrixError:
        evals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        L = vecs * np.sqrt(np.clip(evals, 0.0, None))[None, :]
    return mean + L @ z


def propagate_realization(model: DeepGPModel, Xprime, seed: int,
                          smooth: str = "none") -> np.ndarray:
    """One posterior realization of the full stack evaluated at Xprime.

    ``smooth="noise"`` re-fits each layer's drawn data through a conditioning
    step that includes the layer noise, which shrinks the draws toward the
    layer mean; the default noise-free conditioning leaves them unchanged.

    Returns the final-layer function values, shape (n', output dim).
    """
    if smooth not in ("none", "noise"):
        raise ValueError("smooth must be 'none' or 'noise'")
    Xprime = np.atleast_2d(np.asarray(Xprime, dtype=float))
    rng = rng_for(seed)
    try:
        mean1, cov1 = predict_layer1(model, Xprime)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"layer 1 propagation failed: {exc}") from exc
    values = _draw_gaussian(mean1, cov1, rng)
    for t in range(model.n_latents):
        cache = _layer_pred_cache(model, t)
        kern, Z = cache["kernel"], cache["Z"]
        try:
            Ksu = gram(values, Z, kern)
            mean = Ksu @ cache["V"]
            Kss = gram(values, values, kern)
            cov = Kss - Ksu @ cache["Dmat"] @ Ksu.T
            cov = 0.5 * (cov + cov.T)
            drawn = _draw_gaussian(mean, cov, rng)
            if smooth == "noise":
                Kn = Kss + (1.0 / cache["beta"]) * np.eye(Kss.shape[0])
                L, _ = chol_psd(Kn)
                drawn = Kss @ scipy.linalg.cho_solve((L, True), drawn)
            values = drawn
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"layer {t + 2} propagation failed: {exc}") from exc
    return values


def mean_estimate(realization) -> np.ndarray:
    """Monte Carlo mean over the realization rows, per output coordinate."""
    r = np.atleast_2d(np.asarray(realization, dtype=float))
    return r.sum(axis=0) / r.shape[0]


def var_estimate(realization) -> np.ndarray:
    """Population-form Monte Carlo variance over the realization rows."""
    r = np.atleast_2d(np.asarray(realization, dtype=float))
    if r.shape[0] < 2:
        raise ValueError("variance estimate needs at least two rows")
    e = mean_estimate(r)
    d = r - e
    return (d * d).sum(axis=0) / r.shape[0]


def _silverman_bandwidth(x) -> float:
    n = x.size
    std = float(np.std(x))
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    a = min(std, iqr / 1.34) if iqr > 0 else std
    if a <= 0:
        a = max(abs(float(np.mean(x))), 1.0) * 1e-6
    return 0.9 * a * n ** (-0.2)


def kde_curve(values, abscissae) -> np.ndarray:
    """Gaussian kernel density with Silverman bandwidth on a fixed grid.

    Normalized over the grid by the trapezoid rule, which corrects the tail
    mass the finite grid would otherwise lose.
    """
    x = np.asarray(values, dtype=float).ravel()
    h = _silverman_bandwidth(x)
    z = (abscissae[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * np.sqrt(2.0 * np.pi))
    mass = np.trapezoid(dens, abscissae)
    if mass > 0:
        dens = dens / mass
    return dens


def _pdf_columns(pdf_at, out_grid: Grid2D):
    cols = []
    for loc in pdf_at:
        if isinstance(loc, (int, np.integer)):
            cols.append((("col", int(loc)), int(loc)))
            continue
        if out_grid is None:
            raise ValueError("pdf locations given as coordinates need out_grid")
        x, y = float(loc[0]), float(loc[1])
        ix = min(int(x * out_grid.nx), out_grid.nx - 1)
        iy = min(int(y * out_grid.ny), out_grid.ny - 1)
        cols.append(((x, y), iy * out_grid.nx + ix))
    return cols


def uq_report(model: DeepGPModel, dist: InputDistribution, n_prime: int,
              n_repeats: int, seed: int, pdf_at=None, out_grid: Grid2D = None,
              smooth: str = "none") -> UQReport:
    """Repeat the sampling/propagation process and aggregate the statistics.

    Each repeat draws a fresh input sample and a fresh posterior
    realization.  Error bars are two standard errors of the across-repeat
    average (they shrink like 1/sqrt(n_repeats)); the PDF bands are two
    plain standard deviations across repeats.
    """
    if n_repeats < 2:
        raise ValueError("need at least two repeats")
    means, variances = [], []
    pdf_cols = _pdf_columns(pdf_at, out_grid) if pdf_at else []
    pdf_values = [[] for _ in pdf_cols]
    for j in range(n_repeats):
        Xp = sample_inputs(dist, n_prime, seed=_derived_seed(seed, j, 0))
        realization = propagate_realization(model, Xp,
                                            seed=_derived_seed(seed, j, 1),
                                            smooth=smooth)
        means.append(mean_estimate(realization))
        variances.append(var_estimate(realization))
        for i, (_, col) in enumerate(pdf_cols):
            pdf_values[i].append(realization[:, col].copy())
    means = np.asarray(means)
    variances = np.asarray(variances)
    root_n = np.sqrt(n_repeats)
    report = UQReport(
        mean_of_mean=means.mean(axis=0),
        mean_of_variance=variances.mean(axis=0),
        errorbar_mean=2.0 * means.std(axis=0) / root_n,
        errorbar_variance=2.0 * variances.std(axis=0) / root_n,
        n_inner=int(n_prime),
        n_repeats=int(n_repeats),
    )
    for i, (loc, col) in enumerate(pdf_cols):
        all_vals = np.concatenate(pdf_values[i])
        lo, hi = float(all_vals.min()), float(all_vals.max())
        margin = 0.1 * max(hi - lo, 1e-12)
        grid = np.linspace(lo - margin, hi + margin, PDF_GRID_SIZE)
        curves = np.asarray([kde_curve(v, grid) for v in pdf_values[i]])
        mean_curve = curves.mean(axis=0)
        band = 2.0 * curves.std(axis=0)
        report.pdf_points.append(PdfEstimate(
            location=loc, column=col, abscissae=grid, mean_density=mean_curve,
            lower=np.clip(mean_curve - band, 0.0, None),
            upper=mean_curve + band))
    return report


def _derived_seed(seed, *key):
    # flatten the hierarchy into one integer stream id for rng_for
    out = int(seed)
    for k in key:
        out = out * 1000003 + int(k) + 1
    return out & 0x7FFFFFFFFFFFFFFF


def mc_baseline(simulator, dist: InputDistribution, N: int, seed: int,
                pdf_at=None, out_grid: Grid2D = None):
    """Plain Monte Carlo over the actual simulator: the ground truth.

    ``simulator`` maps one permeability row to one output row.  Returns
    ``(mean, variance, pdfs)`` with the population-form variance and one
    density estimate per requested location.
    """
    if N < 2:
        raise ValueError("need at least two samples")
    pdf_cols = _pdf_columns(pdf_at, out_grid) if pdf_at else []
    sum_y = None
    sum_sq = None
    collected = [np.empty(N) for _ in pdf_cols]
    for i in range(N):
        rng = rng_for(seed, i)
        xi = np.clip(rng.uniform(size=dist.k_xi), 1e-15, 1.0 - 1e-15)
        K = permeability(dist.kle, xi)
        try:
            y = np.asarray(simulator(K), dtype=float).ravel()
        except Exception as exc:
            raise RuntimeError(f"simulator failed at sample {i}: {exc}") from exc
        if sum_y is None:
            sum_y = np.zeros_like(y)
            sum_sq = np.zeros_like(y)
        sum_y += y
        sum_sq += y * y
        for c, (_, col) in enumerate(pdf_cols):
            collected[c][i] = y[col]
    mean = sum_y / N
    variance = np.clip(sum_sq / N - mean * mean, 0.0, None)
    pdfs = []
    for c, (loc, col) in enumerate(pdf_cols):
        vals = collected[c]
        lo, hi = float(vals.min()), float(vals.max())
        margin = 0.1 * max(hi - lo, 1e-12)
        grid = np.linspace(lo - margin, hi + margin, PDF_GRID_SIZE)
        curve = kde_curve(vals, grid)
        pdfs.append(PdfEstimate(location=loc, column=col, abscissae=grid,
                                mean_density=curve, lower=curve, upper=curve))
    return mean, variance, pdfs
