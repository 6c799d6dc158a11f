from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np
import pandas as pd

from data.config import default_map, load_run_file, output_dir
from data.duplicates import zinc_duplicates
from data.fetch import find_dataset
from data.loader import (
    design_matrix,
    learn_spec,
    load_block,
    load_duplicates,
    load_grid,
    load_model,
    load_observations,
    nearest_covariates,
    read_table,
    save_model,
)
from data.models import (
    BlockSpec,
    ClassicalLoss,
    CovarianceParams,
    CovariateSpec,
    FitConfig,
    IntervalKind,
    LambdaMode,
    LambdaModeKind,
    LambdaSelection,
    Location,
    RunConfig,
)
from opd.errors import (
    ApproximationError,
    CalibrationError,
    ConfigurationError,
    DomainError,
    EstimationError,
    NumericalError,
    OpdError,
)
from opd.intervals import loocv_coverage, select_lambda_by_width
from opd.montecarlo import simulate_field
from opd.variogram import estimate_measurement_error, iterative_gls_fit
from reports.maps import block_records, interval_records, prediction_rows, special_sites
from reports.tables import (
    asymmetry_frame,
    coverage_frame,
    prediction_frame,
    selection_frame,
    semivariogram_frame,
    write_csv,
)

DEFAULT_LAMBDA_GRID = "-3:3:0.5"
DEFAULT_COVERAGE_LAMBDAS = "-3,-2,-1,0,1,2,3"
DEFAULT_ASYMMETRY_LAMBDAS = "-3,-2,-1,-0.5,0,1,2,3"
DEFAULT_LOSSES = "SEL,AEL,ARL,QTL:0.25,QTL:0.75"
BUILTIN_DUPLICATES = "zinc"


class ConfigError(click.ClickException):
    exit_code = 2


class ComputationError(click.ClickException):
    exit_code = 3


@contextmanager
def reporting_errors():
    """Translate library errors into click exceptions with the documented exit codes."""
    try:
        yield
    except (ConfigurationError, DomainError) as exc:
        raise ConfigError(str(exc)) from exc
    except EstimationError as exc:
        for it in exc.trace:
            click.echo(f"  iteration {it.iteration}: max|Δβ|={it.max_change:.3g} "
                       f"objective={it.objective:.4g}", err=True)
        raise ComputationError(str(exc)) from exc
    except (NumericalError, CalibrationError, ApproximationError, OpdError) as exc:
        raise ComputationError(str(exc)) from exc


class LambdaModeType(click.ParamType):
    """A number, 'calibrate:q' or 'select-by-width'."""
    name = "lambda"

    def convert(self, value, param, ctx):
        if isinstance(value, LambdaMode):
            return value
        text = str(value).strip().lower()
        if text == LambdaModeKind.SELECT_BY_WIDTH.value:
            return LambdaMode(LambdaModeKind.SELECT_BY_WIDTH)
        if text.startswith("calibrate:"):
            try:
                q = float(text.partition(":")[2])
            except ValueError:
                self.fail(f"{value!r} needs a probability after 'calibrate:'", param, ctx)
            if not 0.0 < q < 1.0:
                self.fail(f"calibration level must lie in (0, 1), got {q}", param, ctx)
            return LambdaMode(LambdaModeKind.CALIBRATE, q)
        try:
            lam = float(text)
        except ValueError:
            self.fail(f"{value!r} is not a number, calibrate:q or select-by-width", param, ctx)
        if not np.isfinite(lam):
            self.fail("λ must be finite", param, ctx)
        return LambdaMode(LambdaModeKind.CONSTANT, lam)


LAMBDA_MODE = LambdaModeType()


def parse_floats(text: str) -> list[float]:
    """'-1,0,1' or 'start:stop:step' (stop included)."""
    text = text.strip()
    try:
        if ":" not in text:
            return [float(p) for p in text.split(",") if p.strip()]
        start, stop, step = (float(p) for p in text.split(":"))
    except ValueError:
        raise ConfigurationError(f"Cannot read numbers from '{text}'") from None
    if step <= 0 or stop < start:
        raise ConfigurationError(f"Bad range '{text}'")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 12) for k in range(count)]


def _run_config(lam: LambdaMode, alpha: float, m: int, seed: int) -> RunConfig:
    return RunConfig(lambda_mode=lam, alpha=alpha, m=m, seed=seed)


def _select_by_width(model, grid, errors, X, run: RunConfig, lambda_grid: str,
                     n_random: int) -> tuple[list[int], LambdaSelection]:
    rows = special_sites(grid, errors, run.seed, n_random)
    sites = [Location((grid["x"].iloc[k], grid["y"].iloc[k]), X[k]) for k in rows]
    return rows, select_lambda_by_width(model, sites, parse_floats(lambda_grid), run.alpha,
                                        run.m, run.seed)


@click.group()
@click.option("--config", "config_path", default=None, type=click.Path(dir_okay=False),
              help="key = value run file; command-line flags take precedence")
@click.pass_context
def cli(ctx: click.Context, config_path: str | None):
    """Optimal power-divergence spatial prediction with prediction intervals."""
    if config_path:
        with reporting_errors():
            settings = load_run_file(Path(config_path))
        ctx.default_map = default_map(settings, cli.commands)


@cli.command("fit")
@click.option("--data", "data_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Observation CSV with x, y, the value column and covariates "
                   "(auto-detected in data/raw/ if not specified)")
@click.option("--value-column", default="value", help="Column holding the positive measurements")
@click.option("--covariates", default="", help="e.g. dist,soil:cat,ffreq:cat,x:std")
@click.option("--duplicates", "duplicates_path", default=None,
              help="CSV of replicated measurements (columns z1, z2), or 'zinc' for the "
                   "shipped Meuse zinc duplicates")
@click.option("--sigma2-eps", default=None, type=float,
              help="Measurement-error variance, when no duplicates file is given")
@click.option("--n-bins", default=15, type=int, help="Semivariogram lag bins")
@click.option("--max-lag-fraction", default=0.5, type=float,
              help="Largest lag as a fraction of the largest pair distance")
@click.option("--min-pairs", default=30, type=int, help="Minimum pairs per retained bin")
@click.option("--tol", default=1e-6, type=float, help="Convergence tolerance on max|Δβ|")
@click.option("--max-iter", default=50, type=int, help="Maximum GLS iterations")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Model file to write (default output/model.json)")
def fit(data_path, value_column, covariates, duplicates_path, sigma2_eps, n_bins,
        max_lag_fraction, min_pairs, tol, max_iter, out_path):
    """Estimate σ²_ε, the spherical covariance and β by iterated GLS."""
    out = Path(out_path) if out_path else output_dir() / "model.json"

    with reporting_errors():
        if (duplicates_path is None) == (sigma2_eps is None):
            raise ConfigurationError("Give exactly one of --duplicates or --sigma2-eps")
        pairs = None
        if duplicates_path == BUILTIN_DUPLICATES:
            pairs = zinc_duplicates()
        elif duplicates_path:
            pairs = load_duplicates(Path(duplicates_path))
        filepath = Path(data_path) if data_path else find_dataset()
        config = FitConfig(n_bins=n_bins, max_lag_fraction=max_lag_fraction,
                           min_pairs=min_pairs, tol=tol, max_iter=max_iter)
        spec = CovariateSpec.parse(covariates)

        click.echo(f"Loading observations: {filepath}")
        dataset, spec = load_observations(filepath, value_column, spec)
        click.echo(f"  {dataset.n} sites, design columns: {', '.join(dataset.covariate_names)}")

        if pairs is not None:
            sigma2_eps = estimate_measurement_error(pairs)
            source = f"duplicates ({pairs.pairs.shape[0]} pairs)"
        else:
            source = "given"
        click.echo(f"σ²_ε = {sigma2_eps:.5g} ({source})")

        result = iterative_gls_fit(dataset, sigma2_eps, config)
        save_model(out, result, dataset, spec, value_column, source)
        write_csv(semivariogram_frame(result.semivariogram), out.with_suffix(".semivariogram.csv"))

    click.echo(f"\nCoefficients ({result.iterations} iterations):")
    for name, b, (lo, hi) in zip(dataset.covariate_names, result.beta, result.beta_ci):
        click.echo(f"  {name:>12s} {b: .4f}  [{lo: .4f}, {hi: .4f}]")
    t = result.theta
    click.echo(f"σ²_η = {t.sigma2_eta:.4g}, range = {t.range_r:.4g}, "
               f"σ²_ξ = {t.sigma2_xi:.4g}, σ²_ε = {t.sigma2_eps:.4g}")


def run_options(func):
    """Options shared by the Monte Carlo commands."""
    for decorator in reversed([
        click.option("--alpha", default=0.05, type=float, help="1 - nominal coverage"),
        click.option("--M", "m", default=100_000, type=int, help="Monte Carlo draws per site"),
        click.option("--seed", default=42, type=int, help="Root seed; site k uses substream k"),
    ]):
        func = decorator(func)
    return func


@cli.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Model file written by 'fit'")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Prediction sites CSV (x, y and the covariate columns)")
@click.option("--lambda", "lam", default="0", type=LAMBDA_MODE,
              help="λ, calibrate:q for per-site λ*_q, or select-by-width")
@run_options
@click.option("--intervals/--no-intervals", default=True, help="Add Monte Carlo interval bounds")
@click.option("--interval-kind", default="unconditional",
              type=click.Choice([k.value for k in IntervalKind]), help="Cut-off distribution")
@click.option("--lambda-grid", default=DEFAULT_LAMBDA_GRID,
              help="Grid searched by select-by-width (start:stop:step or a list)")
@click.option("--selection-sites", default=10, type=int,
              help="Random sites added to the five fixed ones for select-by-width")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Output CSV (default output/predictions.csv)")
def predict(model_path, grid_path, lam, alpha, m, seed, intervals, interval_kind, lambda_grid,
            selection_sites, out_path):
    """OPD predictors, bias, RMSPE, minimised ELP/ELJ and interval bounds at every grid site."""
    out = Path(out_path) if out_path else output_dir() / "predictions.csv"
    with reporting_errors():
        run = _run_config(lam, alpha, m, seed)
        model, spec = load_model(Path(model_path))
        grid, X, errors = load_grid(Path(grid_path), spec)

        selected = None
        if run.lambda_mode.kind is LambdaModeKind.SELECT_BY_WIDTH:
            _, selection = _select_by_width(model, grid, errors, X, run, lambda_grid,
                                            selection_sites)
            selected = selection.median

        kind = IntervalKind(interval_kind) if intervals else None
        rows = prediction_rows(model, grid, X, errors, run, kind, selected)
        write_csv(prediction_frame(rows), out)


@cli.command("intervals")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Model file written by 'fit'")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Prediction sites CSV")
@click.option("--lambda", "lam", default="0", type=LAMBDA_MODE,
              help="λ, calibrate:q or select-by-width")
@run_options
@click.option("--lambda-grid", default=DEFAULT_LAMBDA_GRID, help="Grid searched by select-by-width")
@click.option("--selection-sites", default=10, type=int,
              help="Random sites added to the five fixed ones for select-by-width")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Output CSV (default output/intervals.csv)")
def intervals(model_path, grid_path, lam, alpha, m, seed, lambda_grid, selection_sites, out_path):
    """Conditional and unconditional intervals, cut-offs and width ratios."""
    out = Path(out_path) if out_path else output_dir() / "intervals.csv"
    with reporting_errors():
        run = _run_config(lam, alpha, m, seed)
        model, spec = load_model(Path(model_path))
        grid, X, errors = load_grid(Path(grid_path), spec)
        selected = None
        if run.lambda_mode.kind is LambdaModeKind.SELECT_BY_WIDTH:
            _, selection = _select_by_width(model, grid, errors, X, run, lambda_grid,
                                            selection_sites)
            selected = selection.median
        records = interval_records(model, grid, X, errors, run, selected)
        write_csv(pd.DataFrame.from_records(records), out)


@cli.command("coverage")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Model file written by 'fit'")
@click.option("--lambdas", default=DEFAULT_COVERAGE_LAMBDAS,
              help="λ values (list or start:stop:step)")
@click.option("--kind", default="both",
              type=click.Choice(["both"] + [k.value for k in IntervalKind]),
              help="Which intervals to score")
@click.option("--alpha", default=0.05, type=float, help="1 - nominal coverage")
@click.option("--M", "m", default=100_000, type=int, help="Monte Carlo draws per site")
@click.option("--seed", default=42, type=int, help="Root seed; site i uses substream i")
@click.option("--loocv-refit", is_flag=True, default=False,
              help="Re-estimate β and θ on every leave-one-out dataset")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Output CSV (default output/coverage.csv)")
def coverage(model_path, lambdas, kind, alpha, m, seed, loocv_refit, out_path):
    """Leave-one-out coverage of the observations by their prediction intervals."""
    out = Path(out_path) if out_path else output_dir() / "coverage.csv"
    with reporting_errors():
        _run_config(LambdaMode(LambdaModeKind.CONSTANT, 0.0), alpha, m, seed)
        model, _ = load_model(Path(model_path))
        kinds = list(IntervalKind) if kind == "both" else [IntervalKind(kind)]
        refit = FitConfig() if loocv_refit else None
        results = []
        for k, interval_kind in enumerate(kinds, 1):
            click.echo(f"[{k}/{len(kinds)}] {interval_kind.value} intervals")
            results.extend(loocv_coverage(model, parse_floats(lambdas), alpha, interval_kind,
                                          m, seed, refit))
        write_csv(coverage_frame(results, alpha), out)


@cli.command("simulate")
@click.option("--sites", "sites_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV of sites (x, y and covariate columns)")
@click.option("--model", "model_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Take β, θ and the covariate coding from a model file")
@click.option("--covariates", default="", help="Covariate spec when no model file is given")
@click.option("--beta", default=None, help="Comma-separated β, intercept first")
@click.option("--sigma2-eta", default=None, type=float, help="Spherical partial sill")
@click.option("--range", "range_r", default=None, type=float, help="Spherical range")
@click.option("--sigma2-xi", default=0.0, type=float, help="Microscale variance")
@click.option("--sigma2-eps", default=0.0, type=float, help="Measurement-error variance")
@click.option("--seed", default=42, type=int, help="Random seed")
@click.option("--value-column", default="value", help="Name of the simulated column")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Output CSV (default output/simulated.csv)")
def simulate(sites_path, model_path, covariates, beta, sigma2_eta, range_r, sigma2_xi,
             sigma2_eps, seed, value_column, out_path):
    """Draw one synthetic dataset Z = exp(W + ε) at the given sites."""
    out = Path(out_path) if out_path else output_dir() / "simulated.csv"
    with reporting_errors():
        if model_path:
            model, spec = load_model(Path(model_path))
            coefficients, theta = model.beta, model.theta
        else:
            if beta is None or sigma2_eta is None or range_r is None:
                raise ConfigurationError("Without --model, give --beta, --sigma2-eta and --range")
            spec = CovariateSpec.parse(covariates)
            coefficients = np.array(parse_floats(beta))
            theta = CovarianceParams(sigma2_eta, range_r, sigma2_xi, sigma2_eps)

        df = read_table(Path(sites_path), ["x", "y", *(t.name for t in spec.terms)])
        if not model_path:
            spec = learn_spec(df, spec)
        X, errors = design_matrix(df, spec)
        bad = [k for k, msg in enumerate(errors) if msg]
        if bad:
            raise DomainError(f"Cannot build covariates for row {bad[0]}: {errors[bad[0]]}")
        if X.shape[1] != coefficients.size:
            raise ConfigurationError(f"{coefficients.size} coefficients for {X.shape[1]} design columns")

        click.echo(f"Simulating {len(df):,} sites (seed {seed})")
        df[value_column] = simulate_field(df[["x", "y"]].to_numpy(float), X, coefficients, theta, seed)
        write_csv(df, out)


@cli.command("asymmetry")
@click.option("--lambdas", default=DEFAULT_ASYMMETRY_LAMBDAS, help="PDL λ values")
@click.option("--losses", default=DEFAULT_LOSSES, help="Classical losses, e.g. SEL,AEL,QTL:0.25")
@click.option("--points", default=99, type=int, help="f grid k/(points+1), k = 1..points")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Output CSV (default output/asymmetry.csv)")
def asymmetry(lambdas, losses, points, out_path):
    """Asymmetry A(f) curves for PDL and classical losses."""
    out = Path(out_path) if out_path else output_dir() / "asymmetry.csv"
    with reporting_errors():
        if points < 1:
            raise ConfigurationError("--points must be positive")
        f_grid = np.arange(1, points + 1) / (points + 1.0)
        classical = [ClassicalLoss.parse(token) for token in losses.split(",") if token.strip()]
        write_csv(asymmetry_frame(parse_floats(lambdas), classical, f_grid), out)


@cli.command("select-lambda")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Model file written by 'fit'")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Prediction sites CSV")
@click.option("--lambda-grid", default=DEFAULT_LAMBDA_GRID, help="start:stop:step or a list")
@run_options
@click.option("--selection-sites", default=10, type=int,
              help="Random sites added to the five fixed ones")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Output CSV (default output/lambda_selection.csv)")
def select_lambda(model_path, grid_path, lambda_grid, alpha, m, seed, selection_sites, out_path):
    """Median over selected sites of the λ with the narrowest unconditional interval."""
    out = Path(out_path) if out_path else output_dir() / "lambda_selection.csv"
    with reporting_errors():
        run = _run_config(LambdaMode(LambdaModeKind.SELECT_BY_WIDTH), alpha, m, seed)
        model, spec = load_model(Path(model_path))
        grid, X, errors = load_grid(Path(grid_path), spec)
        rows, selection = _select_by_width(model, grid, errors, X, run, lambda_grid,
                                           selection_sites)
        write_csv(selection_frame(grid, rows, selection.per_site), out)
    click.echo(f"\nSelected λ* = {selection.median:g}")


@cli.command("block")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Model file written by 'fit'")
@click.option("--points", "points_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Quadrature points CSV (x, y, covariates, optional weight)")
@click.option("--rectangle", default=None,
              help="xmin,xmax,ymin,ymax of a rectangular block (midpoint rule)")
@click.option("--nx", default=10, type=int, help="Midpoints along x for --rectangle")
@click.option("--ny", default=10, type=int, help="Midpoints along y for --rectangle")
@click.option("--grid", "grid_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Grid CSV giving --rectangle points the covariates of their nearest site")
@click.option("--lambdas", default="-1,0,1", help="λ values (list or start:stop:step)")
@click.option("--M", "m", default=100_000, type=int, help="Monte Carlo draws of the block average")
@click.option("--seed", default=42, type=int, help="Random seed")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Output CSV (default output/block.csv)")
def block_predict(model_path, points_path, rectangle, nx, ny, grid_path, lambdas, m, seed, out_path):
    """Predict the average of Y over a block from quadrature points."""
    out = Path(out_path) if out_path else output_dir() / "block.csv"
    with reporting_errors():
        _run_config(LambdaMode(LambdaModeKind.CONSTANT, 0.0), 0.05, m, seed)
        if (points_path is None) == (rectangle is None):
            raise ConfigurationError("Give exactly one of --points or --rectangle")
        model, spec = load_model(Path(model_path))
        if points_path:
            region, X = load_block(Path(points_path), spec)
        else:
            if grid_path is None:
                raise ConfigurationError("--rectangle needs --grid to supply covariates")
            corners = parse_floats(rectangle)
            if len(corners) != 4 or corners[0] >= corners[1] or corners[2] >= corners[3]:
                raise ConfigurationError(f"--rectangle needs xmin<xmax,ymin<ymax, got '{rectangle}'")
            if nx < 1 or ny < 1:
                raise ConfigurationError("--nx and --ny must be positive")
            region = BlockSpec.rectangle(*corners, nx, ny)
            grid, grid_X, errors = load_grid(Path(grid_path), spec)
            X = nearest_covariates(region.points, grid, grid_X, errors)
        records = block_records(model, region, X, parse_floats(lambdas), m, seed)
        write_csv(pd.DataFrame.from_records(records), out)


@cli.command("spark-predict")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Model file written by 'fit'")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Prediction sites CSV")
@click.option("--lambda", "lam", default="0", type=LAMBDA_MODE,
              help="λ or calibrate:q")
@run_options
@click.option("--intervals/--no-intervals", default=True, help="Add Monte Carlo interval bounds")
@click.option("--interval-kind", default="unconditional",
              type=click.Choice([k.value for k in IntervalKind]), help="Cut-off distribution")
@click.option("--partitions", default=8, type=int, help="Spark partitions over the grid")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Output CSV (default output/spark_predictions.csv)")
def spark_predict(model_path, grid_path, lam, alpha, m, seed, intervals, interval_kind,
                  partitions, out_path):
    """Grid prediction distributed with PySpark (same output as 'predict')."""
    try:
        from spark.grid import get_or_create_session, predict_grid
    except ImportError:
        click.echo("PySpark is not installed. Run: pip install pyspark", err=True)
        raise SystemExit(1)

    out = Path(out_path) if out_path else output_dir() / "spark_predictions.csv"
    with reporting_errors():
        run = _run_config(lam, alpha, m, seed)
        if run.lambda_mode.kind is LambdaModeKind.SELECT_BY_WIDTH:
            raise ConfigurationError("spark-predict takes a constant λ or calibrate:q; "
                                     "run 'select-lambda' first")
        model, spec = load_model(Path(model_path))
        grid, X, errors = load_grid(Path(grid_path), spec)

        click.echo("Starting Spark session...")
        spark = get_or_create_session()
        spark.sparkContext.setLogLevel("WARN")
        try:
            click.echo(f"Predicting at {len(grid):,} sites on {partitions} partitions...")
            kind = IntervalKind(interval_kind) if intervals else None
            rows = predict_grid(spark, model, grid, X, errors, run, kind, partitions=partitions)
        finally:
            spark.stop()
        write_csv(prediction_frame(rows), out)


if __name__ == "__main__":
    cli()
