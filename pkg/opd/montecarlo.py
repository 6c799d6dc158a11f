"""Distribution-free OPD estimation from draws, delta-method approximations, samplers."""

from collections.abc import Iterator

import numpy as np
from scipy.special import logsumexp

from data.models import (
    BlockSpec,
    CovarianceParams,
    JointSamples,
    Location,
    PredictiveSamples,
    SampleSource,
)
from opd.errors import ApproximationError, DomainError, NumericalError
from opd.lognormal import LogGaussianModel, block_conditional_law, predictive_law
from opd.loss import is_minus_one_branch
from opd.variogram import cross_covariance, spd_cholesky

JOINT_BATCH = 10_000


def substream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one task; the stream index is part of the key."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


def _draws(samples: PredictiveSamples | np.ndarray) -> np.ndarray:
    if isinstance(samples, PredictiveSamples):
        return samples.draws
    return PredictiveSamples(samples, seed=-1).draws


def opd_estimate(samples: PredictiveSamples | np.ndarray, lam: float) -> float:
    """(M⁻¹ Σ y^(λ+1))^(1/(λ+1)), or the geometric mean at λ = -1, in log space."""
    log_y = np.log(_draws(samples))
    if is_minus_one_branch(lam):
        return float(np.exp(log_y.mean()))
    power = lam + 1.0
    log_moment = logsumexp(power * log_y) - np.log(log_y.size)
    return float(np.exp(log_moment / power))


def opd_estimator_variance(samples: PredictiveSamples | np.ndarray, lam: float) -> float:
    """Delta-method variance of opd_estimate for M draws.

    Written as δ̂²·var((y/δ̂)^(λ+1)) / (M(λ+1)²) so that large draws do not overflow.
    """
    y = _draws(samples)
    m = y.size
    if m < 2:
        raise DomainError("Estimator variance needs at least two draws")
    if is_minus_one_branch(lam):
        log_y = np.log(y)
        return float(np.exp(2.0 * log_y.mean()) * log_y.var(ddof=1) / m)
    power = lam + 1.0
    delta = opd_estimate(y, lam)
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = np.exp(power * (np.log(y) - np.log(delta)))
        variance = np.square(delta) * np.var(scaled, ddof=1) / (m * power ** 2)
    if not np.isfinite(variance):
        raise NumericalError(f"Estimator variance overflowed for λ={lam:g} (δ̂={delta:.4g})")
    return float(variance)


def _cv2(mean: float, variance: float) -> float:
    if not mean > 0:
        raise DomainError(f"Mean must be positive, got {mean}")
    if variance < 0:
        raise DomainError(f"Variance must be nonnegative, got {variance}")
    return variance / mean ** 2


def delta_method_predictor(mean: float, variance: float, lam: float) -> float:
    """mean·(1 + λCV²/2 - λ³CV⁴/8); the λ = -1 case is the same expression."""
    cv2 = _cv2(mean, variance)
    factor = 1.0 + 0.5 * lam * cv2 - lam ** 3 * cv2 ** 2 / 8.0
    if factor <= 0:
        raise ApproximationError(
            f"Delta-method factor {factor:.4g} ≤ 0 (λ={lam:g}, CV²={cv2:.4g}); use Monte Carlo"
        )
    return mean * factor


def delta_method_fractional_moment(mean: float, variance: float, lam: float) -> float:
    """E(Y^(λ+1)) ≈ mean^(λ+1)(1 + λ(λ+1)CV²/2), λ ≠ -1."""
    if is_minus_one_branch(lam):
        raise DomainError("The fractional-moment approximation is undefined at λ = -1")
    cv2 = _cv2(mean, variance)
    return mean ** (lam + 1.0) * (1.0 + 0.5 * lam * (lam + 1.0) * cv2)


def block_predict_average(pointwise, block: BlockSpec) -> float:
    """Weighted average of pointwise OPD predictors; optimal for block-averaged loss."""
    pointwise = np.asarray(pointwise, dtype=float).ravel()
    if pointwise.size != block.weights.size:
        raise DomainError(f"{pointwise.size} predictors for {block.weights.size} quadrature points")
    return float(block.weights @ pointwise)


def block_predict_delta(block_mean: float, block_variance: float, lam: float) -> float:
    return delta_method_predictor(block_mean, block_variance, lam)


def sample_predictive(model: LogGaussianModel, site: Location, m: int, seed: int,
                      stream: int = 0) -> PredictiveSamples:
    """M draws from [Y(s₀) | Z] = exp{μ + √v·N(0,1)}."""
    law = predictive_law(model, site)
    rng = substream(seed, stream)
    draws = np.exp(law.mu + np.sqrt(law.v) * rng.standard_normal(m))
    return PredictiveSamples(draws, seed, SampleSource.CONDITIONAL)


def _joint_factor(model: LogGaussianModel, site: Location) -> tuple[np.ndarray, np.ndarray]:
    """Mean and Cholesky factor of (W(s₀), W(s₁), ..., W(sₙ))."""
    theta = model.theta
    points = np.vstack([site.coords[None, :], model.dataset.locations])
    covariates = np.vstack([site.covariates[None, :], model.dataset.covariates])
    mean = covariates @ model.beta - 0.5 * theta.sigma2_w
    return mean, spd_cholesky(cross_covariance(theta, points, points))


def iter_joint(model: LogGaussianModel, site: Location, m: int,
               rng: np.random.Generator, batch: int = JOINT_BATCH) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (log y₀, log z) batches of joint draws; log z includes measurement error."""
    mean, factor = _joint_factor(model, site)
    sd_eps = np.sqrt(model.theta.sigma2_eps)
    n = model.dataset.n
    done = 0
    while done < m:
        size = min(batch, m - done)
        w = mean + rng.standard_normal((size, n + 1)) @ factor.T
        log_z = w[:, 1:] + rng.normal(-0.5 * model.theta.sigma2_eps, sd_eps, (size, n))
        yield w[:, 0], log_z
        done += size


def sample_joint(model: LogGaussianModel, site: Location, m: int, seed: int,
                 stream: int = 0) -> JointSamples:
    """M joint draws of (Y(s₀), Z) from the fitted model."""
    rng = substream(seed, stream)
    y0_parts, z_parts = [], []
    for log_y0, log_z in iter_joint(model, site, m, rng):
        y0_parts.append(np.exp(log_y0))
        z_parts.append(np.exp(log_z))
    return JointSamples(np.concatenate(y0_parts), np.vstack(z_parts), seed)


def sample_block_predictive(model: LogGaussianModel, block: BlockSpec, covariates: np.ndarray,
                            m: int, seed: int, stream: int = 0) -> PredictiveSamples:
    """Draws of Y(B) = Σ wᵢY(uᵢ) from the conditional joint law at the quadrature points."""
    mean, cov = block_conditional_law(model, block.points, covariates)
    factor = spd_cholesky(cov)
    rng = substream(seed, stream)
    w = mean + rng.standard_normal((m, mean.size)) @ factor.T
    return PredictiveSamples(np.exp(w) @ block.weights, seed, SampleSource.CONDITIONAL)


def simulate_field(locations: np.ndarray, covariates: np.ndarray, beta: np.ndarray,
                   theta: CovarianceParams, seed: int, stream: int = 0) -> np.ndarray:
    """One realisation of Z = exp(W + ε) at the given sites."""
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    rng = substream(seed, stream)
    mean = covariates @ np.asarray(beta, dtype=float) - 0.5 * theta.sigma2_w
    factor = spd_cholesky(cross_covariance(theta, locations, locations))
    w = mean + factor @ rng.standard_normal(mean.size)
    eps = rng.normal(-0.5 * theta.sigma2_eps, np.sqrt(theta.sigma2_eps), mean.size)
    return np.exp(w + eps)
