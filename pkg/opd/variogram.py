"""Parameter estimation: measurement error, robust semivariogram, WLS, iterated GLS."""

import time

import click
import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist, squareform
from scipy.stats import norm

from data.models import (
    CovarianceParams,
    DuplicatePairs,
    EmpiricalSemivariogram,
    FitConfig,
    GlsFit,
    GlsIteration,
    SpatialDataset,
    WlsFit,
)
from opd.errors import DomainError, EstimationError, NumericalError, RankError

# Cressie–Hawkins bias correction: 2γ̂ = mean(|d|^½)⁴ / (0.457 + 0.494/N)
CH_CONSTANT = 0.457
CH_SLOPE = 0.494

JITTER_SCALE = 1e-10  # first jitter, relative to trace/n
JITTER_DOUBLINGS = 8
MIN_WLS_BINS = 3
WLS_RESTARTS = 4
WLS_MAX_ITER = 20_000
Z_95 = float(norm.ppf(0.975))


def estimate_measurement_error(pairs: DuplicatePairs) -> float:
    """MLE of σ²_ε from duplicates: (1/2P) Σ (ln z1 - ln z2)²."""
    logs = np.log(pairs.pairs)
    diffs = logs[:, 0] - logs[:, 1]
    return float(np.sum(diffs ** 2) / (2.0 * diffs.size))


def spherical_cov(h, sigma2: float, r: float):
    """Spherical covariance: σ²(1 - 1.5h/r + 0.5(h/r)³) on [0, r], zero beyond."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise DomainError("Lag distances must be nonnegative")
    if not r > 0:
        raise DomainError(f"Range must be positive, got {r}")
    x = h / r
    value = np.where(x <= 1.0, sigma2 * (1.0 - 1.5 * x + 0.5 * x ** 3), 0.0)
    return value[()] if value.ndim == 0 else value


def spherical_semivariogram(h, partial_sill: float, range_r: float, nugget: float):
    """γ(h) = c₀ + σ²_η(1.5h/r - 0.5(h/r)³) for 0 < h ≤ r, c₀ + σ²_η beyond, γ(0) = 0."""
    h = np.asarray(h, dtype=float)
    gamma = nugget + partial_sill - spherical_cov(h, partial_sill, range_r)
    return np.where(h > 0, gamma, 0.0)


def pairwise_distances(locations: np.ndarray) -> np.ndarray:
    return squareform(pdist(np.atleast_2d(locations)))


def cross_distances(points: np.ndarray, locations: np.ndarray) -> np.ndarray:
    return cdist(np.atleast_2d(points), np.atleast_2d(locations))


def spd_cholesky(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter (1e-10·trace/n, doubling) if needed."""
    matrix = np.asarray(matrix, dtype=float)
    if not np.any(matrix):
        return np.zeros_like(matrix)
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        pass
    n = matrix.shape[0]
    jitter = JITTER_SCALE * max(np.trace(matrix) / n, np.finfo(float).tiny)
    for _ in range(JITTER_DOUBLINGS):
        try:
            return linalg.cholesky(matrix + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            jitter *= 2.0
    raise NumericalError(f"Covariance matrix not positive definite after jitter {jitter / 2:.3g}")


def covariance_matrix(theta: CovarianceParams, locations: np.ndarray) -> np.ndarray:
    """Σ_Z̃ = Σ_η + (σ²_ξ + σ²_ε) I."""
    dist = pairwise_distances(locations)
    sigma = spherical_cov(dist, theta.sigma2_eta, theta.range_r)
    sigma[np.diag_indices_from(sigma)] += theta.nugget
    return sigma


def data_cholesky(theta: CovarianceParams, locations: np.ndarray) -> np.ndarray:
    """Cholesky factor of Σ_Z̃. Conditioning needs Σ_Z̃ ≠ 0, unlike sampling."""
    sigma = covariance_matrix(theta, locations)
    if not np.any(sigma):
        raise NumericalError("Covariance of the log data is identically zero "
                             "(σ²_η = σ²_ξ = σ²_ε = 0); nothing to condition on")
    return spd_cholesky(sigma)


def cross_covariance(theta: CovarianceParams, points: np.ndarray,
                     locations: np.ndarray) -> np.ndarray:
    """C_W between points and sites; σ²_ξ enters only at zero distance."""
    dist = cross_distances(points, locations)
    cov = spherical_cov(dist, theta.sigma2_eta, theta.range_r)
    return cov + theta.sigma2_xi * (dist == 0.0)


def build_covariances(theta: CovarianceParams, locations: np.ndarray,
                      s0: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Return (Σ_Z̃, c(s₀), σ²_W), with Σ_Z̃ checked positive definite."""
    data_cholesky(theta, locations)
    sigma = covariance_matrix(theta, locations)
    c = cross_covariance(theta, np.asarray(s0, dtype=float)[None, :], locations)[0]
    return sigma, c, theta.sigma2_w


def robust_semivariogram(residuals: np.ndarray, locations: np.ndarray,
                         n_bins: int = 15, max_lag: float | None = None,
                         min_pairs: int = 30) -> EmpiricalSemivariogram:
    """Cressie–Hawkins estimator on equal-width bins over (0, max_lag].

    max_lag defaults to half the largest pairwise distance; bins with fewer
    than min_pairs pairs are dropped.
    """
    residuals = np.asarray(residuals, dtype=float).ravel()
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    if residuals.size != locations.shape[0]:
        raise DomainError(f"{residuals.size} residuals for {locations.shape[0]} locations")
    if residuals.size < 2:
        raise DomainError("A semivariogram needs at least two points")

    lags = pdist(locations)
    i, j = np.triu_indices(residuals.size, k=1)
    root_diffs = np.sqrt(np.abs(residuals[i] - residuals[j]))
    if max_lag is None:
        max_lag = 0.5 * lags.max()
    if not max_lag > 0:
        raise EstimationError("All sites coincide; no lag to bin")

    keep = lags <= max_lag
    lags, root_diffs = lags[keep], root_diffs[keep]
    width = max_lag / n_bins
    bins = np.minimum((lags / width).astype(int), n_bins - 1)

    counts = np.bincount(bins, minlength=n_bins)
    lag_sums = np.bincount(bins, weights=lags, minlength=n_bins)
    root_sums = np.bincount(bins, weights=root_diffs, minlength=n_bins)
    retained = counts >= min_pairs
    if not np.any(retained):
        raise EstimationError(
            f"No lag bin holds {min_pairs} pairs ({lags.size} pairs within {max_lag:.4g})"
        )

    n = counts[retained].astype(float)
    two_gamma = (root_sums[retained] / n) ** 4 / (CH_CONSTANT + CH_SLOPE / n)
    return EmpiricalSemivariogram(lag_sums[retained] / n, 0.5 * two_gamma, counts[retained])


def initial_guess(residuals: np.ndarray, locations: np.ndarray) -> CovarianceParams:
    """σ²_η = c₀ = var(e)/2, r = max distance / 3."""
    half = 0.5 * float(np.var(residuals, ddof=1))
    max_dist = float(pdist(np.atleast_2d(locations)).max())
    return CovarianceParams(sigma2_eta=half, range_r=max_dist / 3.0, sigma2_xi=half)


def _wls_objective(params: np.ndarray, emp: EmpiricalSemivariogram) -> float:
    partial_sill, range_r, nugget = params
    if range_r <= 0 or partial_sill < 0 or nugget < 0:
        return np.inf
    model = spherical_semivariogram(emp.lags, partial_sill, range_r, nugget)
    model = np.maximum(model, np.finfo(float).tiny)
    return float(np.sum(emp.counts * (emp.gamma / model - 1.0) ** 2))


def _pure_nugget(emp: EmpiricalSemivariogram, range_r: float) -> WlsFit | None:
    """Best flat model γ ≡ c₀, c₀ = ΣNγ̂² / ΣNγ̂. None when γ̂ is identically zero."""
    first = float(np.sum(emp.counts * emp.gamma))
    if not first > 0:
        return None
    sill = float(np.sum(emp.counts * emp.gamma ** 2)) / first
    objective = _wls_objective(np.array([0.0, range_r, sill]), emp)
    return WlsFit(0.0, range_r, sill, objective)


def fit_spherical_wls(emp: EmpiricalSemivariogram, init: CovarianceParams) -> WlsFit:
    """Fit (σ²_η, r, c₀) to γ̂ with Cressie weights N·(γ̂/γ - 1)².

    `init.nugget` seeds c₀. Bounded Nelder–Mead in coordinates scaled by the
    starting point, restarted from its own optimum until the objective stops
    improving. A range below the first retained lag makes the split between σ²_η
    and c₀ unidentifiable; whenever the flat model fits at least as well the
    result is a pure nugget, σ²_η = 0.
    """
    if len(emp) < MIN_WLS_BINS:
        raise EstimationError(f"WLS needs at least {MIN_WLS_BINS} bins, got {len(emp)}")

    floor = 1e-3 * max(float(emp.gamma.max()), np.finfo(float).tiny)
    scale = np.array([max(init.sigma2_eta, floor), init.range_r, max(init.nugget, floor)])
    bounds = [(0.0, None), (np.finfo(float).eps, None), (0.0, None)]
    u = np.ones(3)

    def objective(u_scaled: np.ndarray) -> float:
        return _wls_objective(u_scaled * scale, emp)

    fatol = 1e-13 * max(1.0, objective(u))
    best = None
    iterations = 0
    for _ in range(WLS_RESTARTS):
        result = minimize(objective, u, method="Nelder-Mead", bounds=bounds,
                          options={"xatol": 1e-10, "fatol": fatol,
                                   "maxiter": WLS_MAX_ITER, "maxfev": 2 * WLS_MAX_ITER})
        iterations += int(result.nit)
        improved = best is None or result.fun < best.fun - fatol
        if best is None or result.fun < best.fun:
            best = result
        if not improved:
            break
        u = result.x

    pure = _pure_nugget(emp, float(best.x[1] * scale[1]))
    if pure is not None and not pure.objective > best.fun + fatol:
        return WlsFit(pure.partial_sill, pure.range_r, pure.nugget, pure.objective, iterations)
    if not np.isfinite(best.fun) or not best.success:
        raise EstimationError(f"WLS semivariogram fit did not converge: {best.message}",
                              last=best.x * scale)
    partial_sill, range_r, nugget = (float(v) for v in best.x * scale)
    return WlsFit(partial_sill, range_r, nugget, float(best.fun), iterations)


def gls_coefficients(X: np.ndarray, z: np.ndarray, chol: np.ndarray,
                     offset: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """β = (X'Σ⁻¹X)⁻¹ X'Σ⁻¹(z + offset·1) given the lower Cholesky factor of Σ.

    Returns β and (X'Σ⁻¹X)⁻¹.
    """
    wx = linalg.solve_triangular(chol, X, lower=True)
    wz = linalg.solve_triangular(chol, z + offset, lower=True)
    info = wx.T @ wx
    try:
        info_chol = linalg.cho_factor(info, lower=True)
    except linalg.LinAlgError:
        raise RankError("X'Σ⁻¹X is singular") from None
    beta = linalg.cho_solve(info_chol, wx.T @ wz)
    cov_beta = linalg.cho_solve(info_chol, np.eye(X.shape[1]))
    return beta, cov_beta


def iterative_gls_fit(data: SpatialDataset, sigma2_eps: float,
                      config: FitConfig | None = None) -> GlsFit:
    """OLS start, then alternate residual semivariogram → WLS → GLS until β settles.

    Each round uses σ²_ξ = max(c₀ - σ²_ε, 0) and the log-scale offset
    0.5(σ²_W + σ²_ε) in both the GLS update and the residuals.
    """
    config = config or FitConfig()
    X = data.covariates
    z = data.log_values
    n, p = X.shape
    if n <= p:
        raise DomainError(f"Need more observations ({n}) than covariates ({p})")
    if np.linalg.matrix_rank(X) < p:
        raise RankError("Covariate matrix is rank deficient")
    if sigma2_eps < 0:
        raise DomainError("σ²_ε must be nonnegative")

    beta, *_ = np.linalg.lstsq(X, z, rcond=None)
    residuals = z - X @ beta
    max_lag = config.max_lag_fraction * float(pdist(data.locations).max())
    theta = config.initial or initial_guess(residuals, data.locations)

    trace: list[GlsIteration] = []
    click.echo(f"Iterated GLS on {n} sites, {p} covariates (σ²_ε = {sigma2_eps:.5g})")
    for k in range(1, config.max_iter + 1):
        t0 = time.time()
        emp = robust_semivariogram(residuals, data.locations, config.n_bins, max_lag,
                                   config.min_pairs)
        wls = fit_spherical_wls(emp, theta)
        theta = CovarianceParams(
            sigma2_eta=wls.partial_sill,
            range_r=wls.range_r,
            sigma2_xi=max(wls.nugget - sigma2_eps, 0.0),
            sigma2_eps=sigma2_eps,
        )
        offset = 0.5 * (theta.sigma2_w + sigma2_eps)
        chol = data_cholesky(theta, data.locations)
        new_beta, cov_beta = gls_coefficients(X, z, chol, offset)
        change = float(np.max(np.abs(new_beta - beta)))
        trace.append(GlsIteration(k, new_beta.tolist(), theta, wls.objective, change))
        click.echo(f"  [{k}/{config.max_iter}] sill={theta.sigma2_eta:.4g} "
                   f"range={theta.range_r:.4g} nugget={wls.nugget:.4g} "
                   f"max|Δβ|={change:.3g} ({time.time() - t0:.1f}s)")
        beta = new_beta
        residuals = z - X @ beta + offset
        if change < config.tol:
            se = np.sqrt(np.diag(cov_beta))
            ci = np.column_stack([beta - Z_95 * se, beta + Z_95 * se])
            click.echo(f"  converged after {k} iterations")
            return GlsFit(beta, ci, theta, emp, wls, trace)

    raise EstimationError(
        f"GLS did not converge in {config.max_iter} iterations "
        f"(last max|Δβ| = {trace[-1].max_change:.3g})",
        trace=trace, last=beta,
    )
