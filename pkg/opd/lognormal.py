"""Closed-form inference for the log-Gaussian model with multiplicative error.

Z = exp(W + ε) with W = x'β + η + ξ, all Gaussian components shifted by
minus half their variance so that E(Y(s)) = exp{x(s)'β}. Parameters are
plugged in; every quantity below conditions on them.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import norm

from data.models import (
    BlockSpec,
    CovarianceParams,
    Location,
    PredictiveLaw,
    PredictorMoments,
    SpatialDataset,
)
from opd.errors import CalibrationError, DomainError, NumericalError
from opd.loss import is_zero_branch
from opd.variogram import cross_covariance, data_cholesky

MAX_LOG = float(np.log(np.finfo(float).max))
NEGATIVE_VARIANCE_TOL = 1e-8


@dataclass(eq=False)
class LogGaussianModel:
    """Fitted model: data, β, θ, the Cholesky factor of Σ_Z̃ and Σ_Z̃⁻¹(Z̃ - E Z̃)."""
    dataset: SpatialDataset
    beta: np.ndarray
    theta: CovarianceParams
    chol: np.ndarray = field(init=False, repr=False)
    centered: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        if self.beta.size != self.dataset.covariates.shape[1]:
            raise DomainError(f"{self.beta.size} coefficients for "
                              f"{self.dataset.covariates.shape[1]} covariates")
        self.chol = data_cholesky(self.theta, self.dataset.locations)
        self.centered = self.dataset.log_values - self.expected_log_data()
        self.alpha = linalg.cho_solve((self.chol, True), self.centered)

    def expected_log_data(self) -> np.ndarray:
        """E(Z̃) = Xβ - 0.5(σ²_W + σ²_ε)1."""
        shift = 0.5 * (self.theta.sigma2_w + self.theta.sigma2_eps)
        return self.dataset.covariates @ self.beta - shift

    def site(self, i: int) -> Location:
        return Location(self.dataset.locations[i], self.dataset.covariates[i])

    def drop_site(self, i: int) -> "LogGaussianModel":
        """Same β and θ, conditioned on every datum except the i-th."""
        keep = np.ones(self.dataset.n, dtype=bool)
        keep[i] = False
        return LogGaussianModel(self.dataset.subset(keep), self.beta, self.theta)

    def with_values(self, values: np.ndarray) -> "LogGaussianModel":
        data = SpatialDataset(self.dataset.locations, values, self.dataset.covariates,
                              list(self.dataset.covariate_names))
        return LogGaussianModel(data, self.beta, self.theta)


def _mean_term(model: LogGaussianModel, covariates: np.ndarray) -> np.ndarray:
    covariates = np.atleast_2d(covariates)
    if covariates.shape[1] != model.beta.size:
        raise DomainError(f"Site has {covariates.shape[1]} covariates, model has {model.beta.size}")
    return covariates @ model.beta


def kriging_weights(model: LogGaussianModel, site: Location) -> tuple[np.ndarray, np.ndarray]:
    """Return (Σ_Z̃⁻¹c(s₀), c(s₀))."""
    c = cross_covariance(model.theta, site.coords[None, :], model.dataset.locations)[0]
    return linalg.cho_solve((model.chol, True), c), c


def predictive_law(model: LogGaussianModel, site: Location) -> PredictiveLaw:
    """Log-scale conditional mean and variance of W(s₀) given the data."""
    c = cross_covariance(model.theta, site.coords[None, :], model.dataset.locations)[0]
    half = linalg.solve_triangular(model.chol, c, lower=True)
    sigma2_w = model.theta.sigma2_w
    csc = float(half @ half)
    x0_beta = float(_mean_term(model, site.covariates)[0])
    mu = x0_beta - 0.5 * sigma2_w + float(c @ model.alpha)

    v = sigma2_w - csc
    if v < -NEGATIVE_VARIANCE_TOL * max(1.0, sigma2_w):
        raise NumericalError(f"Conditional variance {v:.3g} is negative beyond tolerance")
    v = max(v, 0.0)
    return PredictiveLaw(mu=mu, v=v, x0_beta=x0_beta, csc=min(csc, sigma2_w), sigma2_w=sigma2_w)


def _safe_exp(log_value: float, what: str) -> float:
    if log_value > MAX_LOG:
        raise NumericalError(f"{what} overflows (log value {log_value:.6g})", log_value=log_value)
    return float(np.exp(log_value))


def opd_predict(law: PredictiveLaw, lam: float) -> float:
    """δ*_λ = exp{μ + 0.5(λ+1)v}; λ = -1 gives the predictive median."""
    return _safe_exp(law.mu + 0.5 * (lam + 1.0) * law.v, "OPD predictor")


def lognormal_quantile(law: PredictiveLaw, q: float) -> float:
    if not 0.0 < q < 1.0:
        raise DomainError(f"q must lie in (0, 1), got {q}")
    return _safe_exp(law.mu + np.sqrt(law.v) * norm.ppf(q), "Predictive quantile")


def predictor_moments(law: PredictiveLaw, lam: float) -> PredictorMoments:
    """Moments of δ*_λ(Z) over the data: log δ* ~ N(x'β - ½cSc + ½λv, cSc)."""
    spread = law.sigma2_w - law.csc
    log_mean = law.x0_beta - 0.5 * law.csc + 0.5 * lam * spread
    mean = _safe_exp(law.x0_beta + 0.5 * lam * spread, "Predictor mean")
    variance = _safe_exp(2.0 * law.x0_beta + lam * spread, "Predictor variance") * np.expm1(law.csc)
    return PredictorMoments(mean=mean, variance=float(variance), log_mean=log_mean,
                            log_var=law.csc)


def bias(law: PredictiveLaw, lam: float) -> float:
    """E(δ*_λ - Y(s₀)); has the sign of λ whenever v > 0."""
    return float(np.exp(law.x0_beta) * np.expm1(0.5 * lam * (law.sigma2_w - law.csc)))


def mspe(law: PredictiveLaw, lam: float) -> float:
    spread = law.sigma2_w - law.csc
    value = np.exp(2.0 * law.x0_beta) * (
        np.exp(law.sigma2_w)
        - 2.0 * np.exp(law.csc + 0.5 * lam * spread)
        + np.exp(law.csc + lam * spread)
    )
    return max(float(value), 0.0)


def elp_min(law: PredictiveLaw, lam: float) -> float:
    """Minimised expected loss under the predictive law, (δ*_λ - δ*_0)/λ.

    Data enter through μ; exp{μ + v/2} is the predictive mean δ*_0.
    """
    posterior_mean = np.exp(law.mu + 0.5 * law.v)
    if is_zero_branch(lam):
        return float(0.5 * law.v * posterior_mean)
    return float(posterior_mean * np.expm1(0.5 * lam * law.v) / lam)


def elj_min(law: PredictiveLaw, lam: float) -> float:
    """Minimised expected loss under the joint law; equals bias/λ."""
    spread = law.sigma2_w - law.csc
    if is_zero_branch(lam):
        return float(0.5 * spread * np.exp(law.x0_beta))
    return float(np.exp(law.x0_beta) * np.expm1(0.5 * lam * spread) / lam)


def calibrate_lambda(law: PredictiveLaw, q: float) -> float:
    """λ whose OPD predictor is the predictive q-quantile: 2Φ⁻¹(q)/√v - 1."""
    if not 0.0 < q < 1.0:
        raise DomainError(f"q must lie in (0, 1), got {q}")
    if law.v <= 0.0:
        raise CalibrationError("Predictive variance is zero; every λ gives the same predictor")
    return float(2.0 * norm.ppf(q) / np.sqrt(law.v) - 1.0)


def block_conditional_law(model: LogGaussianModel, points: np.ndarray,
                          covariates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-scale conditional mean vector and covariance of W at several points."""
    points = np.atleast_2d(points)
    c_points = cross_covariance(model.theta, points, model.dataset.locations)
    half = linalg.solve_triangular(model.chol, c_points.T, lower=True)
    prior = cross_covariance(model.theta, points, points)
    mean = (_mean_term(model, covariates) - 0.5 * model.theta.sigma2_w
            + c_points @ model.alpha)
    return mean, prior - half.T @ half


def block_predictive_moments(model: LogGaussianModel, block: BlockSpec,
                             covariates: np.ndarray) -> tuple[float, float]:
    """E(Y(B)|Z) and var(Y(B)|Z) for the quadrature average Y(B) = Σ wᵢY(uᵢ)."""
    mean, cov = block_conditional_law(model, block.points, covariates)
    point_means = np.exp(mean + 0.5 * np.diag(cov))
    weighted = block.weights * point_means
    variance = float(weighted @ np.expm1(cov) @ weighted)
    return float(weighted.sum()), max(variance, 0.0)
