"""Tests for data models."""

import numpy as np
import pytest

from data.models import (
    BlockSpec,
    CovarianceParams,
    CovariateSpec,
    FitConfig,
    IntervalBounds,
    LambdaMode,
    LambdaModeKind,
    PredictionRow,
    RunConfig,
    SpatialDataset,
    TermKind,
)
from opd.errors import ConfigurationError, DomainError


def test_covariance_params_derived_variances():
    theta = CovarianceParams(sigma2_eta=0.2, range_r=100.0, sigma2_xi=0.05, sigma2_eps=0.01)
    assert theta.sigma2_w == pytest.approx(0.25)
    assert theta.nugget == pytest.approx(0.06)


def test_covariance_params_validation():
    with pytest.raises(DomainError):
        CovarianceParams(sigma2_eta=-0.1, range_r=10.0)
    with pytest.raises(DomainError):
        CovarianceParams(sigma2_eta=0.1, range_r=0.0)


def test_dataset_validation():
    coords = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    X = np.ones((3, 1))
    dataset = SpatialDataset(coords, [1.0, 2.0, 3.0], X)
    assert dataset.n == 3
    assert dataset.covariate_names == ["x0"]
    np.testing.assert_allclose(dataset.log_values, np.log([1.0, 2.0, 3.0]))

    with pytest.raises(DomainError):
        SpatialDataset(coords, [1.0, -2.0, 3.0], X)
    with pytest.raises(DomainError):
        SpatialDataset(coords, [1.0, 2.0], X)
    with pytest.raises(DomainError):
        SpatialDataset([[0.0, 0.0], [0.0, 0.0], [0.0, 1.0]], [1.0, 2.0, 3.0], X)


def test_dataset_subset_keeps_names():
    dataset = SpatialDataset([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [1.0, 2.0, 3.0],
                             np.ones((3, 1)), ["intercept"])
    subset = dataset.subset(np.array([True, False, True]))
    assert subset.n == 2
    assert subset.covariate_names == ["intercept"]
    np.testing.assert_allclose(subset.values, [1.0, 3.0])


def test_covariate_spec_parse():
    spec = CovariateSpec.parse("dist, soil:cat,ffreq:CAT,x:std")
    assert [t.name for t in spec.terms] == ["dist", "soil", "ffreq", "x"]
    assert [t.kind for t in spec.terms] == [TermKind.NUMERIC, TermKind.CATEGORICAL,
                                            TermKind.CATEGORICAL, TermKind.STANDARDIZED]
    assert spec.describe() == "dist,soil:cat,ffreq:cat,x:std"
    assert CovariateSpec.parse(None).terms == []


def test_covariate_spec_errors():
    with pytest.raises(ConfigurationError):
        CovariateSpec.parse("dist:log")
    with pytest.raises(ConfigurationError):
        CovariateSpec.parse("dist,dist:std")


def test_run_config_validation():
    run = RunConfig(LambdaMode(LambdaModeKind.CONSTANT, 0.0))
    assert (run.alpha, run.m, run.seed) == (0.05, 100_000, 42)
    with pytest.raises(ConfigurationError):
        RunConfig(LambdaMode(LambdaModeKind.CONSTANT, 0.0), alpha=1.0)
    with pytest.raises(ConfigurationError):
        RunConfig(LambdaMode(LambdaModeKind.CONSTANT, 0.0), m=999)


def test_fit_config_validation():
    with pytest.raises(ConfigurationError):
        FitConfig(max_lag_fraction=1.5)
    with pytest.raises(ConfigurationError):
        FitConfig(tol=0.0)
    with pytest.raises(ConfigurationError):
        FitConfig(n_bins=0)


def test_lambda_mode_describe():
    assert LambdaMode(LambdaModeKind.CONSTANT, -0.5).describe() == "-0.5"
    assert LambdaMode(LambdaModeKind.CALIBRATE, 0.9).describe() == "calibrate:0.9"
    assert LambdaMode(LambdaModeKind.SELECT_BY_WIDTH).describe() == "select-by-width"


def test_interval_bounds():
    bounds = IntervalBounds(1.0, 4.0, cutoff=0.3)
    assert bounds.width == 3.0
    assert bounds.contains(1.0) and bounds.contains(4.0)
    assert not bounds.contains(4.5)


def test_block_rectangle_midpoints():
    block = BlockSpec.rectangle(0.0, 4.0, 0.0, 2.0, 2, 1)
    np.testing.assert_allclose(block.points, [[1.0, 1.0], [3.0, 1.0]])
    np.testing.assert_allclose(block.weights, [0.5, 0.5])


def test_block_validation():
    with pytest.raises(DomainError):
        BlockSpec([[0.0, 0.0]], [0.5, 0.5])
    with pytest.raises(DomainError):
        BlockSpec([[0.0, 0.0], [1.0, 1.0]], [1.5, -0.5])


def test_prediction_row_normalised():
    row = PredictionRow(x=0.0, y=0.0, delta=6.0, normaliser=2.0)
    assert row.normalised(row.delta) == 3.0
    assert row.normalised(None) is None
    assert PredictionRow(x=0.0, y=0.0, error="missing 'dist'").normalised(1.0) is None
