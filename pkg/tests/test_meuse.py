"""
Reproduction checks on the Meuse zinc data.

The data are not redistributed; these tests run only when meuse.csv
(columns x, y, zinc, dist, soil, ffreq) has been placed under data/raw/.
"""

import pytest

from data.duplicates import zinc_duplicates
from data.fetch import find_meuse
from data.loader import load_observations
from data.models import CovariateSpec, FitConfig
from opd.variogram import estimate_measurement_error, iterative_gls_fit

MEUSE = find_meuse()
pytestmark = pytest.mark.skipif(MEUSE is None, reason="data/raw/meuse.csv not present")

COVARIATES = "dist,soil:cat,ffreq:cat,x:std"


@pytest.fixture(scope="module")
def meuse_fit():
    dataset, _ = load_observations(MEUSE, "zinc", CovariateSpec.parse(COVARIATES))
    sigma2_eps = estimate_measurement_error(zinc_duplicates())
    return dataset, iterative_gls_fit(dataset, sigma2_eps, FitConfig())


def test_meuse_design(meuse_fit):
    dataset, _ = meuse_fit
    assert dataset.n == 155
    assert dataset.covariate_names == ["intercept", "dist", "soil2", "soil3",
                                       "ffreq2", "ffreq3", "x"]


def test_meuse_coefficients(meuse_fit):
    _, fit = meuse_fit
    assert fit.beta[0] == pytest.approx(6.973, abs=0.15)
    assert fit.beta[1] == pytest.approx(-2.152, abs=0.15)
    assert fit.beta[4] == pytest.approx(-0.593, abs=0.15)
    assert fit.beta[5] == pytest.approx(-0.621, abs=0.15)
    assert fit.iterations <= 10


def test_meuse_covariance_parameters(meuse_fit):
    _, fit = meuse_fit
    assert fit.theta.sigma2_eta == pytest.approx(0.1855, rel=0.15)
    assert fit.theta.range_r == pytest.approx(991.76, rel=0.15)
