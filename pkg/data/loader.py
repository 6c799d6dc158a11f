import json
from pathlib import Path

import click
import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from data.models import (
    BlockSpec,
    CovarianceParams,
    CovariateSpec,
    CovariateTerm,
    DuplicatePairs,
    GlsFit,
    SpatialDataset,
    TermKind,
)
from opd.errors import ConfigurationError, DomainError
from opd.lognormal import LogGaussianModel

COORD_COLUMNS = ("x", "y")
DUPLICATE_COLUMNS = ("z1", "z2")
BLOCK_WEIGHT_COLUMN = "weight"
MODEL_FORMAT = "opd-model/1"


def read_table(filepath: Path, required: list[str]) -> pd.DataFrame:
    """Read a CSV and check that the named columns are present."""
    if not filepath.exists():
        raise ConfigurationError(f"File not found: {filepath}")
    df = pd.read_csv(filepath)
    df.columns = [str(c).strip() for c in df.columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ConfigurationError(f"{filepath.name} is missing column(s): {', '.join(missing)}")
    return df


def _level(raw) -> str:
    """Category label; 2.0 and 2 are the same level."""
    if isinstance(raw, (float, np.floating)) and float(raw).is_integer():
        return str(int(raw))
    return str(raw)


def learn_spec(df: pd.DataFrame, spec: CovariateSpec) -> CovariateSpec:
    """Fix categorical levels (sorted, first is baseline) and standardisation constants."""
    levels: dict[str, list[str]] = {}
    scaling: dict[str, tuple[float, float]] = {}
    for term in spec.terms:
        column = df[term.name]
        if column.isna().any():
            raise DomainError(f"Covariate '{term.name}' has missing values in the data")
        if term.kind is TermKind.CATEGORICAL:
            levels[term.name] = sorted({_level(v) for v in column})
        elif term.kind is TermKind.STANDARDIZED:
            values = column.astype(float)
            sd = float(values.std(ddof=1))
            if not sd > 0:
                raise DomainError(f"Covariate '{term.name}' is constant; cannot standardise")
            scaling[term.name] = (float(values.mean()), sd)
    return CovariateSpec(list(spec.terms), levels, scaling)


def column_names(spec: CovariateSpec) -> list[str]:
    names = ["intercept"]
    for term in spec.terms:
        if term.kind is TermKind.CATEGORICAL:
            names.extend(f"{term.name}{level}" for level in spec.levels[term.name][1:])
        else:
            names.append(term.name)
    return names


def _design_row(row: pd.Series, spec: CovariateSpec) -> list[float]:
    values = [1.0]
    for term in spec.terms:
        raw = row[term.name]
        if pd.isna(raw):
            raise DomainError(f"missing '{term.name}'")
        if term.kind is TermKind.CATEGORICAL:
            levels = spec.levels[term.name]
            level = _level(raw)
            if level not in levels:
                raise DomainError(f"unseen level '{level}' for '{term.name}'")
            values.extend(1.0 if level == other else 0.0 for other in levels[1:])
        elif term.kind is TermKind.STANDARDIZED:
            mean, sd = spec.scaling[term.name]
            values.append((float(raw) - mean) / sd)
        else:
            values.append(float(raw))
    return values


def design_matrix(df: pd.DataFrame, spec: CovariateSpec) -> tuple[np.ndarray, list[str]]:
    """Rows of the design matrix; rows that cannot be built are NaN with an error message."""
    width = len(column_names(spec))
    X = np.full((len(df), width), np.nan)
    errors = [""] * len(df)
    for k, (_, row) in enumerate(df.iterrows()):
        try:
            X[k] = _design_row(row, spec)
        except (DomainError, ValueError) as exc:
            errors[k] = str(exc)
    return X, errors


def load_observations(filepath: Path, value_column: str,
                      spec: CovariateSpec) -> tuple[SpatialDataset, CovariateSpec]:
    """Observation sites, positive measurements and the design matrix."""
    df = read_table(filepath, [*COORD_COLUMNS, value_column, *(t.name for t in spec.terms)])
    spec = learn_spec(df, spec)
    X, errors = design_matrix(df, spec)
    bad = [f"row {k}: {msg}" for k, msg in enumerate(errors) if msg]
    if bad:
        raise DomainError("Cannot build covariates for " + "; ".join(bad[:5]))
    dataset = SpatialDataset(df[list(COORD_COLUMNS)].to_numpy(float), df[value_column].to_numpy(float),
                             X, column_names(spec))
    return dataset, spec


def load_grid(filepath: Path, spec: CovariateSpec) -> tuple[pd.DataFrame, np.ndarray, list[str]]:
    """Prediction sites with their design rows and per-row error messages."""
    df = read_table(filepath, list(COORD_COLUMNS))
    for term in spec.terms:
        if term.name not in df.columns:
            df[term.name] = np.nan
    X, errors = design_matrix(df, spec)
    return df, X, errors


def load_block(filepath: Path, spec: CovariateSpec) -> tuple[BlockSpec, np.ndarray]:
    """Quadrature points of one block: x, y, the covariates and an optional weight column.

    Without weights every point counts equally; given weights are rescaled to sum to 1.
    """
    df = read_table(filepath, [*COORD_COLUMNS, *(t.name for t in spec.terms)])
    if df.empty:
        raise DomainError(f"{filepath.name} holds no quadrature points")
    X, errors = design_matrix(df, spec)
    bad = [f"point {k}: {msg}" for k, msg in enumerate(errors) if msg]
    if bad:
        raise DomainError("Cannot build covariates for " + "; ".join(bad[:5]))
    if BLOCK_WEIGHT_COLUMN in df.columns:
        weights = df[BLOCK_WEIGHT_COLUMN].to_numpy(float)
        if not np.all(np.isfinite(weights) & (weights > 0)):
            raise DomainError("Block weights must be positive")
        weights = weights / weights.sum()
    else:
        weights = np.full(len(df), 1.0 / len(df))
    return BlockSpec(df[list(COORD_COLUMNS)].to_numpy(float), weights), X


def nearest_covariates(points: np.ndarray, grid: pd.DataFrame, X: np.ndarray,
                       errors: list[str]) -> np.ndarray:
    """Design row of the nearest usable grid site for every point."""
    usable = np.array([not msg for msg in errors], dtype=bool)
    if not usable.any():
        raise DomainError("No usable grid rows to take block covariates from")
    tree = cKDTree(grid[list(COORD_COLUMNS)].to_numpy(float)[usable])
    _, nearest = tree.query(np.atleast_2d(points))
    return X[usable][nearest]


def load_duplicates(filepath: Path) -> DuplicatePairs:
    df = read_table(filepath, list(DUPLICATE_COLUMNS))
    return DuplicatePairs(df[list(DUPLICATE_COLUMNS)].to_numpy(float))


def _spec_to_dict(spec: CovariateSpec) -> dict:
    return {
        "terms": [{"name": t.name, "kind": t.kind.value} for t in spec.terms],
        "levels": spec.levels,
        "scaling": {name: list(pair) for name, pair in spec.scaling.items()},
    }


def _spec_from_dict(raw: dict) -> CovariateSpec:
    terms = [CovariateTerm(t["name"], TermKind(t["kind"])) for t in raw.get("terms", [])]
    scaling = {name: (float(pair[0]), float(pair[1])) for name, pair in raw.get("scaling", {}).items()}
    return CovariateSpec(terms, dict(raw.get("levels", {})), scaling)


def _theta_to_dict(theta: CovarianceParams) -> dict:
    return {"sigma2_eta": theta.sigma2_eta, "range": theta.range_r,
            "sigma2_xi": theta.sigma2_xi, "sigma2_eps": theta.sigma2_eps}


def save_model(filepath: Path, fit: GlsFit, dataset: SpatialDataset, spec: CovariateSpec,
               value_column: str, sigma2_eps_source: str) -> Path:
    """Write the fitted model, the data it conditions on and the fit diagnostics as JSON."""
    filepath.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "format": MODEL_FORMAT,
        "value_column": value_column,
        "covariates": _spec_to_dict(spec),
        "beta": [
            {"name": name, "estimate": float(b), "ci_lower": float(lo), "ci_upper": float(hi)}
            for name, b, (lo, hi) in zip(dataset.covariate_names, fit.beta, fit.beta_ci)
        ],
        "theta": _theta_to_dict(fit.theta),
        "sigma2_eps_source": sigma2_eps_source,
        "wls": {"partial_sill": fit.wls.partial_sill, "range": fit.wls.range_r,
                "nugget": fit.wls.nugget, "objective": fit.wls.objective},
        "trace": [
            {"iteration": it.iteration, "beta": it.beta, "theta": _theta_to_dict(it.theta),
             "objective": it.objective, "max_change": it.max_change}
            for it in fit.trace
        ],
        "semivariogram": fit.semivariogram.rows(),
        "observations": {
            "x": dataset.locations[:, 0].tolist(),
            "y": dataset.locations[:, 1].tolist(),
            "values": dataset.values.tolist(),
            "design": dataset.covariates.tolist(),
        },
    }
    filepath.write_text(json.dumps(record, indent=2))
    click.echo(f"  -> {filepath}")
    return filepath


def load_model(filepath: Path) -> tuple[LogGaussianModel, CovariateSpec]:
    """Rebuild the fitted model from a model file written by save_model."""
    if not filepath.exists():
        raise ConfigurationError(f"Model file not found: {filepath}")
    try:
        record = json.loads(filepath.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{filepath.name} is not a model file: {exc}") from None
    if record.get("format") != MODEL_FORMAT:
        raise ConfigurationError(f"{filepath.name} has unknown format {record.get('format')!r}")

    obs = record["observations"]
    names = [b["name"] for b in record["beta"]]
    dataset = SpatialDataset(np.column_stack([obs["x"], obs["y"]]), obs["values"],
                             np.asarray(obs["design"], dtype=float), names)
    t = record["theta"]
    theta = CovarianceParams(t["sigma2_eta"], t["range"], t["sigma2_xi"], t["sigma2_eps"])
    beta = np.array([b["estimate"] for b in record["beta"]])
    return LogGaussianModel(dataset, beta, theta), _spec_from_dict(record["covariates"])
