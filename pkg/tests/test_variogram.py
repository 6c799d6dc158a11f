import numpy as np
import pytest

from data.duplicates import zinc_duplicates
from data.models import (
    CovarianceParams,
    DuplicatePairs,
    EmpiricalSemivariogram,
    FitConfig,
    SpatialDataset,
)
from opd.errors import DomainError, EstimationError, NumericalError, RankError
from opd.montecarlo import substream
from opd.variogram import (
    build_covariances,
    covariance_matrix,
    estimate_measurement_error,
    fit_spherical_wls,
    gls_coefficients,
    iterative_gls_fit,
    robust_semivariogram,
    spd_cholesky,
    spherical_cov,
    spherical_semivariogram,
)
from tests.conftest import TRUE_BETA, synthetic_dataset


# --- measurement error ---

def test_zinc_duplicates_measurement_error():
    assert estimate_measurement_error(zinc_duplicates()) == pytest.approx(0.0053, abs=0.0005)


def test_identical_pairs_give_zero():
    assert estimate_measurement_error(DuplicatePairs([(3.0, 3.0), (7.0, 7.0)])) == 0.0


def test_single_pair():
    pairs = DuplicatePairs([(np.e, np.e ** 2)])
    assert estimate_measurement_error(pairs) == pytest.approx(0.5, rel=1e-12)


def test_measurement_error_invariances():
    pairs = zinc_duplicates().pairs
    base = estimate_measurement_error(DuplicatePairs(pairs))
    swapped = estimate_measurement_error(DuplicatePairs(pairs[:, ::-1]))
    scaled = estimate_measurement_error(DuplicatePairs(pairs * 3.7))
    assert swapped == pytest.approx(base, rel=1e-12)
    assert scaled == pytest.approx(base, rel=1e-10)


def test_invalid_pairs():
    with pytest.raises(DomainError):
        DuplicatePairs(np.empty((0, 2)))
    with pytest.raises(DomainError):
        DuplicatePairs([(1.0, 0.0)])


# --- spherical model ---

def test_spherical_cov_examples():
    assert spherical_cov(0.0, 2.0, 5.0) == pytest.approx(2.0)
    assert spherical_cov(5.0, 2.0, 5.0) == pytest.approx(0.0, abs=1e-15)
    assert spherical_cov(2.5, 2.0, 5.0) == pytest.approx(0.625)
    assert spherical_cov(7.0, 2.0, 5.0) == 0.0


def test_spherical_cov_monotone_with_compact_support():
    h = np.linspace(0.0, 10.0, 1001)
    values = spherical_cov(h, 1.5, 4.0)
    assert np.all(np.diff(values) <= 1e-15)
    assert np.all(values[h > 4.0] == 0.0)


def test_spherical_cov_negative_lag():
    with pytest.raises(DomainError):
        spherical_cov(-1.0, 1.0, 1.0)


def test_semivariogram_has_nugget_jump():
    gamma = spherical_semivariogram(np.array([0.0, 1e-9, 10.0]), 0.2, 5.0, 0.04)
    assert gamma[0] == 0.0
    assert gamma[1] == pytest.approx(0.04, abs=1e-9)
    assert gamma[2] == pytest.approx(0.24)


# --- covariances ---

def test_single_site_covariances():
    theta = CovarianceParams(0.3, 10.0, 0.05, 0.01)
    sigma, c, sigma2_w = build_covariances(theta, np.array([[1.0, 2.0]]), np.array([1.0, 2.0]))
    assert c[0] == pytest.approx(0.35)
    assert sigma[0, 0] == pytest.approx(0.36)
    assert sigma2_w == pytest.approx(0.35)


def test_distant_sites_uncorrelated():
    theta = CovarianceParams(1.0, 5.0)
    sigma = covariance_matrix(theta, np.array([[0.0, 0.0], [10.0, 0.0]]))
    assert sigma[0, 1] == 0.0


def test_half_range_off_diagonal():
    theta = CovarianceParams(2.0, 5.0, 0.0, 0.1)
    sigma = covariance_matrix(theta, np.array([[0.0, 0.0], [2.5, 0.0]]))
    assert sigma[0, 1] == pytest.approx(0.625)


def test_eigenvalues_bounded_by_nugget():
    rng = substream(3)
    locations = rng.uniform(0, 100, size=(40, 2))
    theta = CovarianceParams(0.5, 30.0, 0.02, 0.01)
    eigenvalues = np.linalg.eigvalsh(covariance_matrix(theta, locations))
    assert eigenvalues.min() >= theta.nugget - 1e-10


def test_cholesky_jitter_and_failure():
    singular = np.ones((3, 3))
    factor = spd_cholesky(singular)
    assert np.allclose(factor @ factor.T, singular, atol=1e-6)
    with pytest.raises(NumericalError):
        spd_cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_zero_covariance_samples_but_does_not_condition():
    theta = CovarianceParams(0.0, 1.0)
    locations = np.array([[0.0, 0.0], [5.0, 0.0]])
    assert not np.any(spd_cholesky(covariance_matrix(theta, locations)))
    with pytest.raises(NumericalError):
        build_covariances(theta, locations, np.array([1.0, 1.0]))


# --- robust semivariogram ---

def test_two_points_equal_residuals():
    emp = robust_semivariogram(np.array([1.0, 1.0]), np.array([[0.0, 0.0], [1.0, 0.0]]),
                               n_bins=1, max_lag=1.0, min_pairs=1)
    assert emp.gamma[0] == 0.0


def test_two_points_cressie_hawkins():
    emp = robust_semivariogram(np.array([0.0, 2.0]), np.array([[0.0, 0.0], [1.0, 0.0]]),
                               n_bins=1, max_lag=1.0, min_pairs=1)
    assert 2 * emp.gamma[0] == pytest.approx(4.0 / 0.951, rel=1e-12)
    assert emp.counts[0] == 1
    assert emp.lags[0] == pytest.approx(1.0)


def test_white_noise_sill():
    rng = substream(11)
    locations = rng.uniform(0, 100, size=(600, 2))
    residuals = rng.standard_normal(600)
    emp = robust_semivariogram(residuals, locations)
    assert len(emp) == 15
    assert np.all(np.diff(emp.lags) > 0)
    assert np.average(emp.gamma, weights=emp.counts) == pytest.approx(1.0, abs=0.1)


def test_sparse_bins_dropped():
    with pytest.raises(EstimationError):
        robust_semivariogram(np.array([0.0, 1.0, 2.0]), np.array([[0, 0], [1, 0], [0, 1.0]]))


# --- WLS ---

def test_wls_recovers_noiseless_spherical():
    lags = np.linspace(50, 1400, 15)
    gamma = spherical_semivariogram(lags, 0.2, 900.0, 0.04)
    emp = EmpiricalSemivariogram(lags, gamma, np.full(15, 100))
    fit = fit_spherical_wls(emp, CovarianceParams(0.1, 500.0, 0.05))
    assert fit.partial_sill == pytest.approx(0.2, rel=1e-3)
    assert fit.range_r == pytest.approx(900.0, rel=1e-3)
    assert fit.nugget == pytest.approx(0.04, rel=1e-3)
    assert fit.objective < 1e-6


def test_wls_flat_semivariogram_is_pure_nugget():
    lags = np.linspace(50, 1400, 15)
    emp = EmpiricalSemivariogram(lags, np.full(15, 0.3), np.full(15, 100))
    fit = fit_spherical_wls(emp, CovarianceParams(sigma2_eta=0.2, range_r=100.0, sigma2_xi=0.1))
    assert fit.partial_sill == 0.0
    assert fit.nugget == pytest.approx(0.3, rel=1e-12)
    assert fit.objective == pytest.approx(0.0, abs=1e-20)
    assert fit.range_r > 0


def test_wls_needs_three_bins():
    emp = EmpiricalSemivariogram(np.array([1.0, 2.0]), np.array([0.1, 0.2]), np.array([40, 40]))
    with pytest.raises(EstimationError):
        fit_spherical_wls(emp, CovarianceParams(0.1, 2.0, 0.1))


# --- GLS ---

def test_gls_with_identity_is_ols():
    rng = substream(5)
    X = np.column_stack([np.ones(30), rng.standard_normal(30)])
    z = X @ np.array([1.0, 2.0]) + rng.standard_normal(30)
    beta, _ = gls_coefficients(X, z, np.eye(30))
    ols, *_ = np.linalg.lstsq(X, z, rcond=None)
    np.testing.assert_allclose(beta, ols, atol=1e-10)


def test_gls_offset_shifts_intercept():
    rng = substream(6)
    X = np.column_stack([np.ones(25), rng.uniform(size=25)])
    z = rng.standard_normal(25)
    base, _ = gls_coefficients(X, z, np.eye(25))
    shifted, _ = gls_coefficients(X, z, np.eye(25), offset=0.7)
    assert shifted[0] - base[0] == pytest.approx(0.7, abs=1e-10)
    assert shifted[1] == pytest.approx(base[1], abs=1e-10)


def test_gls_singular_design():
    X = np.column_stack([np.ones(10), np.ones(10)])
    with pytest.raises(RankError):
        gls_coefficients(X, np.zeros(10), np.eye(10))


def test_iterative_fit_recovers_coefficients(dataset):
    fit = iterative_gls_fit(dataset, 0.005, FitConfig(min_pairs=20))
    se = (fit.beta_ci[:, 1] - fit.beta_ci[:, 0]) / (2 * 1.959963984540054)
    assert np.all(np.abs(fit.beta - TRUE_BETA) < 4 * se)
    assert fit.iterations >= 1
    assert fit.trace[-1].max_change < 1e-6
    assert fit.theta.sigma2_eps == 0.005
    assert np.all(fit.beta_ci[:, 0] < fit.beta) and np.all(fit.beta < fit.beta_ci[:, 1])


def test_iterative_fit_scale_equivariance(dataset):
    config = FitConfig(min_pairs=20)
    base = iterative_gls_fit(dataset, 0.005, config)
    scaled = SpatialDataset(dataset.locations, dataset.values * 10.0, dataset.covariates)
    moved = iterative_gls_fit(scaled, 0.005, config)
    assert moved.beta[0] - base.beta[0] == pytest.approx(np.log(10.0), abs=1e-6)
    np.testing.assert_allclose(moved.beta[1:], base.beta[1:], atol=1e-6)


def test_iterative_fit_reports_trace_on_failure():
    data = synthetic_dataset()
    with pytest.raises(EstimationError) as excinfo:
        iterative_gls_fit(data, 0.005, FitConfig(min_pairs=20, max_iter=1, tol=1e-300))
    assert len(excinfo.value.trace) == 1


def test_iterative_fit_rejects_rank_deficient_design():
    data = synthetic_dataset()
    X = np.column_stack([data.covariates, data.covariates[:, 1]])
    with pytest.raises(RankError):
        iterative_gls_fit(SpatialDataset(data.locations, data.values, X), 0.005)
