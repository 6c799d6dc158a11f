"""CSV tables: predictions, intervals, coverage, asymmetry curves, semivariograms."""

from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import pandas as pd

from data.models import ClassicalLoss, CoverageResult, EmpiricalSemivariogram, PredictionRow
from opd.loss import asymmetry_classical, asymmetry_pdl

FLOAT_FORMAT = "%.6g"
NORMALISED_FIELDS = ["delta", "bias", "rmspe", "elp", "elj", "lower", "upper"]


def write_csv(df: pd.DataFrame, filepath: Path) -> Path:
    filepath.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(filepath, index=False, float_format=FLOAT_FORMAT)
    click.echo(f"  -> {filepath} ({len(df):,} rows)")
    return filepath


def prediction_frame(rows: list[PredictionRow]) -> pd.DataFrame:
    """Raw fields followed by their exp{x'β}-normalised versions."""
    records = []
    for row in rows:
        record = asdict(row)
        for name in NORMALISED_FIELDS:
            record[f"normalised_{name}"] = row.normalised(getattr(row, name))
        records.append(record)
    df = pd.DataFrame.from_records(records)
    return df.rename(columns={"lam": "lambda"})


def coverage_frame(results: list[CoverageResult], alpha: float) -> pd.DataFrame:
    """One row per (λ, kind), shaped like a coverage table."""
    return pd.DataFrame({
        "lambda": [r.lam for r in results],
        "kind": [r.kind.value for r in results],
        "alpha": alpha,
        "coverage": [r.coverage for r in results],
        "sites": [int(r.per_site.size) for r in results],
    })


def asymmetry_frame(lambdas: list[float], losses: list[ClassicalLoss], f_grid) -> pd.DataFrame:
    """Long format (loss, param, f, A) for the PDL family and classical losses."""
    f_grid = np.asarray(f_grid, dtype=float)
    frames = []
    for lam in lambdas:
        frames.append(pd.DataFrame({"loss": "PDL", "param": lam, "f": f_grid,
                                    "asymmetry": asymmetry_pdl(f_grid, lam)}))
    for loss in losses:
        frames.append(pd.DataFrame({"loss": loss.kind.name,
                                    "param": np.nan if loss.q is None else loss.q,
                                    "f": f_grid,
                                    "asymmetry": asymmetry_classical(loss, f_grid)}))
    return pd.concat(frames, ignore_index=True)


def selection_frame(grid: pd.DataFrame, rows: list[int], chosen: list[float]) -> pd.DataFrame:
    return pd.DataFrame({
        "row": rows,
        "x": grid["x"].to_numpy(float)[rows],
        "y": grid["y"].to_numpy(float)[rows],
        "lambda_star": chosen,
    })


def semivariogram_frame(emp: EmpiricalSemivariogram) -> pd.DataFrame:
    return pd.DataFrame(emp.rows(), columns=["lag", "gamma", "pairs"])
