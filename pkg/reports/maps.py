"""Per-site prediction and interval reports over a grid of locations, and block predictions."""

import time

import click
import numpy as np
import pandas as pd

from data.models import (
    BlockSpec,
    IntervalKind,
    LambdaMode,
    LambdaModeKind,
    Location,
    PredictionRow,
    RunConfig,
)
from opd.errors import ConfigurationError, OpdError
from opd.intervals import conditional_interval, unconditional_interval
from opd.lognormal import (
    LogGaussianModel,
    bias,
    block_predictive_moments,
    calibrate_lambda,
    elj_min,
    elp_min,
    mspe,
    opd_predict,
    predictive_law,
)
from opd.montecarlo import (
    block_predict_average,
    block_predict_delta,
    opd_estimate,
    opd_estimator_variance,
    sample_block_predictive,
    substream,
)

N_FIXED_SITES = 5
N_RANDOM_SITES = 10
PROGRESS_EVERY = 500


def _progress(k: int, total: int, t0: float) -> None:
    if (k + 1) % PROGRESS_EVERY == 0 or k + 1 == total:
        click.echo(f"  [{k + 1}/{total}] sites ({time.time() - t0:.1f}s)")


def site_lambda(mode: LambdaMode, law, selected: float | None = None) -> float:
    """λ for one site: the constant, the per-site calibrated λ*_q, or the selected median."""
    if mode.kind is LambdaModeKind.CONSTANT:
        return mode.value
    if mode.kind is LambdaModeKind.CALIBRATE:
        return calibrate_lambda(law, mode.value)
    if selected is None:
        raise ConfigurationError("select-by-width needs the selected λ before prediction")
    return selected


def _interval(kind: IntervalKind, model, site, lam, run: RunConfig, stream: int):
    build = conditional_interval if kind is IntervalKind.CONDITIONAL else unconditional_interval
    bounds, _ = build(model, site, lam, run.alpha, run.m, run.seed, stream)
    return bounds


def predict_site(model: LogGaussianModel, site: Location, lam: float) -> PredictionRow:
    law = predictive_law(model, site)
    return PredictionRow(
        x=float(site.coords[0]), y=float(site.coords[1]), lam=lam,
        delta=opd_predict(law, lam),
        bias=bias(law, lam),
        rmspe=float(np.sqrt(mspe(law, lam))),
        elp=elp_min(law, lam),
        elj=elj_min(law, lam),
        normaliser=float(np.exp(law.x0_beta)),
    )


def predict_grid_row(model: LogGaussianModel, x: float, y: float, design: np.ndarray, error: str,
                     run: RunConfig, interval_kind: IntervalKind | None = None,
                     selected: float | None = None, stream: int = 0) -> PredictionRow:
    """Full report for one grid site; failures end up in the row's error field."""
    if error:
        return PredictionRow(x, y, error=error)
    site = Location((x, y), design)
    try:
        lam = site_lambda(run.lambda_mode, predictive_law(model, site), selected)
        row = predict_site(model, site, lam)
        if interval_kind is not None:
            bounds = _interval(interval_kind, model, site, lam, run, stream)
            row.lower, row.upper = bounds.lower, bounds.upper
    except OpdError as exc:
        row = PredictionRow(x, y, error=str(exc))
    return row


def prediction_rows(model: LogGaussianModel, grid: pd.DataFrame, X: np.ndarray, errors: list[str],
                    run: RunConfig, interval_kind: IntervalKind | None = None,
                    selected: float | None = None) -> list[PredictionRow]:
    """One PredictionRow per grid site, in grid order; row k draws from substream k."""
    total = len(grid)
    click.echo(f"Predicting at {total:,} sites (λ = {run.lambda_mode.describe()})")
    t0 = time.time()
    xs, ys = grid["x"].to_numpy(float), grid["y"].to_numpy(float)
    rows = []
    for k in range(total):
        rows.append(predict_grid_row(model, float(xs[k]), float(ys[k]), X[k], errors[k], run,
                                     interval_kind, selected, stream=k))
        _progress(k, total, t0)

    failed = sum(1 for r in rows if r.error)
    click.echo(f"  done ({time.time() - t0:.1f}s, {failed:,} rows with errors)")
    return rows


def interval_records(model: LogGaussianModel, grid: pd.DataFrame, X: np.ndarray,
                     errors: list[str], run: RunConfig, selected: float | None = None) -> list[dict]:
    """Conditional and unconditional intervals side by side, with widths and their ratio."""
    total = len(grid)
    click.echo(f"Building conditional and unconditional intervals at {total:,} sites")
    t0 = time.time()
    records = []
    for k in range(total):
        x, y = float(grid["x"].iloc[k]), float(grid["y"].iloc[k])
        record = {"x": x, "y": y, "error": errors[k]}
        if not errors[k]:
            site = Location((x, y), X[k])
            try:
                law = predictive_law(model, site)
                lam = site_lambda(run.lambda_mode, law, selected)
                delta = opd_predict(law, lam)
                cond, cond_cut = conditional_interval(model, site, lam, run.alpha, run.m, run.seed, k)
                uncond, uncond_cut = unconditional_interval(model, site, lam, run.alpha, run.m,
                                                            run.seed, k)
                record.update({
                    "lambda": lam,
                    "delta": delta,
                    "normalised_delta": delta / np.exp(law.x0_beta),
                    "cond_lower": cond.lower, "cond_upper": cond.upper,
                    "cond_width": cond.width, "cond_cutoff": cond_cut.value,
                    "uncond_lower": uncond.lower, "uncond_upper": uncond.upper,
                    "uncond_width": uncond.width, "uncond_cutoff": uncond_cut.value,
                    "width_ratio": cond.width / uncond.width if uncond.width > 0 else np.nan,
                })
            except OpdError as exc:
                record["error"] = str(exc)
        records.append(record)
        _progress(k, total, t0)
    click.echo(f"  done ({time.time() - t0:.1f}s)")
    return records


def block_records(model: LogGaussianModel, region: BlockSpec, X: np.ndarray, lambdas: list[float],
                  m: int, seed: int) -> list[dict]:
    """Predictors of the block average Y(B) for each λ.

    block_average weights the pointwise OPD predictors, block_delta is the
    delta-method predictor from the conditional moments of Y(B), block_mc the
    Monte Carlo OPD estimate from joint draws at the quadrature points.
    """
    click.echo(f"Block of {region.weights.size} quadrature points, {len(lambdas)} λ values, M={m:,}")
    laws = [predictive_law(model, Location(p, x)) for p, x in zip(region.points, X)]
    mean, variance = block_predictive_moments(model, region, X)
    draws = sample_block_predictive(model, region, X, m, seed)
    records = []
    for lam in lambdas:
        record = {"lambda": lam, "block_mean": mean, "block_variance": variance, "error": ""}
        try:
            pointwise = [opd_predict(law, lam) for law in laws]
            record["block_average"] = block_predict_average(pointwise, region)
            record["block_mc"] = opd_estimate(draws, lam)
            record["block_mc_se"] = float(np.sqrt(opd_estimator_variance(draws, lam)))
            record["block_delta"] = block_predict_delta(mean, variance, lam)
        except OpdError as exc:
            record["error"] = str(exc)
        records.append(record)
    return records


def special_sites(grid: pd.DataFrame, errors: list[str], seed: int,
                  n_random: int = N_RANDOM_SITES) -> list[int]:
    """Row indices of the λ-selection sites.

    Five fixed sites (nearest the bounding-box corners and centre) plus a
    seeded random draw from the remaining valid rows.
    """
    valid = np.array([k for k in range(len(grid)) if not errors[k]])
    if valid.size == 0:
        raise ConfigurationError("No grid row has complete covariates")
    coords = grid[["x", "y"]].to_numpy(float)[valid]
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    targets = [(lo[0], lo[1]), (lo[0], hi[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo + hi) / 2.0]

    chosen: list[int] = []
    for target in targets[:N_FIXED_SITES]:
        order = np.argsort(np.hypot(*(coords - np.asarray(target)).T))
        pick = next(int(valid[j]) for j in order if int(valid[j]) not in chosen)
        chosen.append(pick)
        if len(chosen) == valid.size:
            return chosen

    rest = np.array([k for k in valid if k not in chosen])
    rng = substream(seed)
    take = min(n_random, rest.size)
    chosen.extend(int(k) for k in rng.choice(rest, size=take, replace=False))
    return chosen
