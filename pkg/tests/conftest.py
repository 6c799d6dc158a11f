"""Shared fixtures: synthetic log-Gaussian fields with known parameters."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from data.duplicates import ZINC_DUPLICATES
from data.loader import load_observations, save_model
from data.models import (
    CovarianceParams,
    CovariateSpec,
    EmpiricalSemivariogram,
    GlsFit,
    SpatialDataset,
    WlsFit,
)
from opd.lognormal import LogGaussianModel
from opd.montecarlo import simulate_field, substream

# Generating model for the synthetic field: log Z = 5 - 1.0·dist + 0.3·[soil=2] + W + ε
TRUE_BETA = np.array([5.0, -1.0, 0.3])
TRUE_THETA = CovarianceParams(sigma2_eta=0.3, range_r=400.0, sigma2_xi=0.02, sigma2_eps=0.005)
N_SITES = 80
DOMAIN = 1000.0
SEED = 20240

# A small model used where only the conditioning matters (no fitting)
SMALL_THETA = CovarianceParams(sigma2_eta=0.4, range_r=300.0, sigma2_xi=0.05, sigma2_eps=0.01)
SMALL_BETA = np.array([1.0, 0.5])


def synthetic_sites(n: int = N_SITES, seed: int = SEED) -> pd.DataFrame:
    """Random sites on a square with one numeric and one two-level covariate."""
    rng = substream(seed, 99)
    xy = rng.uniform(0.0, DOMAIN, size=(n, 2))
    return pd.DataFrame({
        "x": xy[:, 0].round(3),
        "y": xy[:, 1].round(3),
        "dist": rng.uniform(0.0, 1.0, size=n).round(4),
        "soil": rng.integers(1, 3, size=n),
    })


def synthetic_design(sites: pd.DataFrame) -> np.ndarray:
    return np.column_stack([np.ones(len(sites)), sites["dist"], (sites["soil"] == 2).astype(float)])


def synthetic_dataset(seed: int = SEED, theta: CovarianceParams = TRUE_THETA) -> SpatialDataset:
    sites = synthetic_sites(seed=seed)
    X = synthetic_design(sites)
    coords = sites[["x", "y"]].to_numpy(float)
    values = simulate_field(coords, X, TRUE_BETA, theta, seed)
    return SpatialDataset(coords, values, X, ["intercept", "dist", "soil2"])


def small_model(n: int = 12, seed: int = 7) -> LogGaussianModel:
    """Few sites, intercept plus one covariate, parameters fixed at SMALL_*."""
    rng = substream(seed, 1)
    coords = rng.uniform(0.0, 600.0, size=(n, 2))
    X = np.column_stack([np.ones(n), rng.uniform(0.0, 1.0, n)])
    values = simulate_field(coords, X, SMALL_BETA, SMALL_THETA, seed)
    return LogGaussianModel(SpatialDataset(coords, values, X), SMALL_BETA, SMALL_THETA)


@pytest.fixture
def dataset() -> SpatialDataset:
    return synthetic_dataset()


@pytest.fixture
def model() -> LogGaussianModel:
    return small_model()


@pytest.fixture
def observations_csv(tmp_path: Path) -> Path:
    """Synthetic observations written with the CSV layout the CLI reads."""
    sites = synthetic_sites()
    data = synthetic_dataset()
    sites["value"] = data.values
    filepath = tmp_path / "observations.csv"
    sites.to_csv(filepath, index=False)
    return filepath


@pytest.fixture
def grid_csv(tmp_path: Path) -> Path:
    """A 6 × 6 prediction grid; one row has a soil level never observed, one lacks dist."""
    xs, ys = np.meshgrid(np.linspace(50, 950, 6), np.linspace(50, 950, 6))
    grid = pd.DataFrame({"x": xs.ravel(), "y": ys.ravel()})
    grid["dist"] = np.linspace(0.05, 0.95, len(grid)).round(4)
    grid["soil"] = np.where(np.arange(len(grid)) % 2 == 0, 1, 2)
    grid.loc[3, "soil"] = 7
    grid.loc[5, "dist"] = np.nan
    filepath = tmp_path / "grid.csv"
    grid.to_csv(filepath, index=False)
    return filepath


@pytest.fixture
def duplicates_csv(tmp_path: Path) -> Path:
    filepath = tmp_path / "duplicates.csv"
    pd.DataFrame(ZINC_DUPLICATES, columns=["z1", "z2"]).to_csv(filepath, index=False)
    return filepath


@pytest.fixture
def model_file(observations_csv: Path, tmp_path: Path) -> Path:
    """A model file holding the generating parameters of the synthetic field."""
    dataset, spec = load_observations(observations_csv, "value", CovariateSpec.parse("dist,soil:cat"))
    emp = EmpiricalSemivariogram(np.array([100.0, 200.0, 300.0]), np.array([0.15, 0.24, 0.3]),
                                 np.array([60, 120, 150]))
    wls = WlsFit(TRUE_THETA.sigma2_eta, TRUE_THETA.range_r, TRUE_THETA.nugget, 0.1)
    ci = np.column_stack([TRUE_BETA - 0.2, TRUE_BETA + 0.2])
    fit = GlsFit(TRUE_BETA, ci, TRUE_THETA, emp, wls)
    return save_model(tmp_path / "model.json", fit, dataset, spec, "value", "given")
