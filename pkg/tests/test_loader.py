"""Tests for data loader."""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from data.fetch import find_dataset, find_meuse
from data.loader import (
    MODEL_FORMAT,
    _level,
    column_names,
    design_matrix,
    learn_spec,
    load_duplicates,
    load_grid,
    load_model,
    load_observations,
    read_table,
    save_model,
)
from data.models import (
    CovarianceParams,
    CovariateSpec,
    EmpiricalSemivariogram,
    GlsFit,
    GlsIteration,
    WlsFit,
)
from opd.errors import ConfigurationError, DomainError
from tests.conftest import N_SITES, synthetic_design, synthetic_sites

SPEC = CovariateSpec.parse("dist,soil:cat")


def test_load_observations(observations_csv: Path):
    dataset, spec = load_observations(observations_csv, "value", SPEC)
    assert dataset.n == N_SITES
    assert dataset.covariate_names == ["intercept", "dist", "soil2"]
    assert spec.levels == {"soil": ["1", "2"]}
    np.testing.assert_allclose(dataset.covariates, synthetic_design(synthetic_sites()))


def test_load_observations_missing_column(observations_csv: Path):
    with pytest.raises(ConfigurationError, match="ffreq"):
        load_observations(observations_csv, "value", CovariateSpec.parse("ffreq:cat"))
    with pytest.raises(ConfigurationError):
        load_observations(observations_csv, "zinc", SPEC)


def test_missing_file(tmp_path: Path):
    with pytest.raises(ConfigurationError):
        read_table(tmp_path / "nope.csv", ["x"])


def test_observations_need_complete_covariates(tmp_path: Path):
    df = synthetic_sites(n=12)
    df["value"] = 1.0 + np.arange(12)
    df.loc[4, "dist"] = np.nan
    filepath = tmp_path / "obs.csv"
    df.to_csv(filepath, index=False)
    with pytest.raises(DomainError):
        load_observations(filepath, "value", SPEC)


def test_grid_rows_with_errors(observations_csv: Path, grid_csv: Path):
    _, spec = load_observations(observations_csv, "value", SPEC)
    grid, X, errors = load_grid(grid_csv, spec)
    assert len(grid) == 36
    assert "unseen level '7'" in errors[3]
    assert "missing 'dist'" in errors[5]
    assert np.all(np.isnan(X[3])) and np.all(np.isnan(X[5]))
    ok = [k for k, msg in enumerate(errors) if not msg]
    assert len(ok) == 34
    assert np.all(np.isfinite(X[ok]))


def test_grid_without_covariate_columns(observations_csv: Path, tmp_path: Path):
    _, spec = load_observations(observations_csv, "value", SPEC)
    filepath = tmp_path / "bare.csv"
    pd.DataFrame({"x": [1.0, 2.0], "y": [3.0, 4.0]}).to_csv(filepath, index=False)
    _, X, errors = load_grid(filepath, spec)
    assert all("missing" in msg for msg in errors)
    assert np.all(np.isnan(X))


def test_standardised_covariate():
    df = pd.DataFrame({"elev": [1.0, 2.0, 3.0, 4.0]})
    spec = learn_spec(df, CovariateSpec.parse("elev:std"))
    mean, sd = spec.scaling["elev"]
    assert mean == pytest.approx(2.5)
    assert sd == pytest.approx(np.std([1, 2, 3, 4], ddof=1))
    X, errors = design_matrix(df, spec)
    assert errors == [""] * 4
    assert X[:, 1].mean() == pytest.approx(0.0, abs=1e-12)


def test_constant_covariate_cannot_be_standardised():
    with pytest.raises(DomainError):
        learn_spec(pd.DataFrame({"elev": [2.0, 2.0]}), CovariateSpec.parse("elev:std"))


def test_categorical_levels_and_names():
    df = pd.DataFrame({"ffreq": [3, 1, 2, 2.0]})
    spec = learn_spec(df, CovariateSpec.parse("ffreq:cat"))
    assert spec.levels["ffreq"] == ["1", "2", "3"]
    assert column_names(spec) == ["intercept", "ffreq2", "ffreq3"]
    X, _ = design_matrix(df, spec)
    np.testing.assert_array_equal(X, [[1, 0, 1], [1, 0, 0], [1, 1, 0], [1, 1, 0]])


def test_level_labels():
    assert _level(2.0) == "2"
    assert _level(np.float64(3.0)) == "3"
    assert _level("clay") == "clay"
    assert _level(2.5) == "2.5"


def test_load_duplicates(duplicates_csv: Path):
    pairs = load_duplicates(duplicates_csv)
    assert pairs.pairs.shape == (18, 2)


def _fake_fit(dataset) -> GlsFit:
    theta = CovarianceParams(sigma2_eta=0.28, range_r=410.0, sigma2_xi=0.015, sigma2_eps=0.005)
    emp = EmpiricalSemivariogram(np.array([50.0, 100.0, 150.0]), np.array([0.1, 0.2, 0.25]),
                                 np.array([40, 60, 80]))
    beta = np.array([5.1, -0.9, 0.25])
    ci = np.column_stack([beta - 0.1, beta + 0.1])
    trace = [GlsIteration(1, beta.tolist(), theta, 0.5, 1e-7)]
    return GlsFit(beta, ci, theta, emp, WlsFit(0.28, 410.0, 0.02, 0.5, 120), trace)


def test_model_file_round_trip(observations_csv: Path, tmp_path: Path):
    dataset, spec = load_observations(observations_csv, "value", SPEC)
    fit = _fake_fit(dataset)
    filepath = save_model(tmp_path / "out" / "model.json", fit, dataset, spec, "value", "duplicates")

    record = json.loads(filepath.read_text())
    assert record["format"] == MODEL_FORMAT
    assert record["sigma2_eps_source"] == "duplicates"
    assert [b["name"] for b in record["beta"]] == ["intercept", "dist", "soil2"]
    assert record["beta"][1]["ci_lower"] == pytest.approx(-1.0)

    model, loaded_spec = load_model(filepath)
    np.testing.assert_allclose(model.beta, fit.beta)
    assert model.theta == fit.theta
    np.testing.assert_allclose(model.dataset.values, dataset.values)
    np.testing.assert_allclose(model.dataset.covariates, dataset.covariates)
    assert loaded_spec.levels == spec.levels
    assert loaded_spec.describe() == spec.describe()


def test_load_model_rejects_other_files(tmp_path: Path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_model(broken)
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ConfigurationError, match="unknown format"):
        load_model(other)
    with pytest.raises(ConfigurationError):
        load_model(tmp_path / "missing.json")


def test_find_dataset(tmp_path: Path):
    with pytest.raises(ConfigurationError, match="not found"):
        find_dataset(data_dir=tmp_path / "raw")
    raw = tmp_path / "raw"
    raw.mkdir()
    (raw / "small.csv").write_text("x,y\n1,2\n")
    (raw / "large.csv").write_text("x,y\n1,2\n3,4\n5,6\n")
    assert find_dataset(data_dir=raw).name == "large.csv"
    assert find_dataset("small.csv", data_dir=raw).name == "small.csv"
    assert find_meuse(raw) is None
    with pytest.raises(ConfigurationError):
        find_dataset("meuse.csv", data_dir=raw)
