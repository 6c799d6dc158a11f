"""PDL prediction intervals: cut-offs, bound solvers, LOOCV coverage, λ selection by width.

The interval for predictor δ and cut-off K is {y > 0 : L(δ, y) ≤ K}. Since
L(δ, y) = δ·φ⁺(y/δ), every solver works on the ratio t = y/δ with k = K/δ
and scales back at the end.
"""

import time
import warnings

import click
import numpy as np
from scipy.optimize import brentq
from scipy.stats import chi2

from data.models import (
    CoverageResult,
    Cutoff,
    FitConfig,
    IntervalBounds,
    IntervalKind,
    LambdaSelection,
    Location,
)
from opd.errors import DomainError, EstimationError, OpdError, SolverError
from opd.lognormal import LogGaussianModel, kriging_weights, opd_predict, predictive_law
from opd.loss import BRANCH_TOL, pdl_loss, pdl_loss_limit_at_zero
from opd.montecarlo import iter_joint, sample_predictive, substream
from opd.variogram import iterative_gls_fit

MAX_DOUBLINGS = 64
LOG_FLOOR = float(np.log(1e-300))  # lower search limit for log(y/δ)
ROOT_XTOL = 1e-13
ROOT_MAXITER = 200
NEWTON_MAXITER = 60
EPS = float(np.finfo(float).eps)


def cutoff_from_losses(losses, alpha: float) -> float:
    """(1 - α) empirical quantile of the losses, linear interpolation (type 7)."""
    losses = np.asarray(losses, dtype=float).ravel()
    if losses.size == 0:
        raise DomainError("No losses to take a quantile of")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if losses.size < 1.0 / alpha:
        warnings.warn(f"Cut-off from {losses.size} losses is unreliable for alpha={alpha:g}",
                      stacklevel=2)
    return float(np.quantile(losses, 1.0 - alpha, method="linear"))


def _check_inputs(delta: float, K: float) -> IntervalBounds | None:
    if not delta > 0:
        raise DomainError(f"Predictor must be positive, got {delta}")
    if K < 0:
        raise DomainError(f"Cut-off must be nonnegative, got {K}")
    if K == 0:
        return IntervalBounds(delta, delta, one_sided=False, cutoff=0.0)
    return None


def _cubic_offset(s: float) -> tuple[float, float]:
    """s²(s + 3) and its slope: 6× the λ = 2 ratio loss at t = 1 + s."""
    return s * s * (s + 3.0), 3.0 * s * (s + 2.0)


def _quartic_offset(s: float) -> tuple[float, float]:
    """s²(s² + 4s + 6) and its slope: 12× the λ = 3 ratio loss at t = 1 + s."""
    return s * s * (s * s + 4.0 * s + 6.0), 4.0 * s * (s * s + 3.0 * s + 3.0)


def _offset_root(shape, start: float, fallback: float, c: float) -> float:
    """Root of shape(s) = c on the side of s = 0 where `fallback` lies.

    The t-polynomials cancel badly near their double root at t = 1, so the
    refinement runs in s = t - 1. shape is convex on s > -1 and Newton from a
    point with shape(s) ≥ c on the correct side converges monotonically. The
    closed-form root is used as the start when it qualifies, else `fallback`.
    """
    s = fallback
    if np.isfinite(start) and start > -1.0 and np.sign(start) == np.sign(fallback) \
            and shape(start)[0] >= c:
        s = start
    for _ in range(NEWTON_MAXITER):
        value, slope = shape(s)
        if slope == 0:
            break
        step = (value - c) / slope
        s -= step
        if abs(step) <= 4.0 * EPS * abs(s):
            break
    return float(s)


def _scaled(delta: float, K: float, lower_t: float, upper_t: float) -> IntervalBounds:
    one_sided = lower_t <= 0.0
    return IntervalBounds(0.0 if one_sided else delta * lower_t, delta * upper_t,
                          one_sided=one_sided, cutoff=K)


def bounds_quadratic(delta: float, K: float) -> IntervalBounds:
    """λ = 1: δ ± √(2δK), the lower bound floored at 0."""
    point = _check_inputs(delta, K)
    if point:
        return point
    half = np.sqrt(2.0 * delta * K)
    one_sided = delta <= 2.0 * K
    return IntervalBounds(0.0 if one_sided else delta - half, delta + half,
                          one_sided=one_sided, cutoff=K)


def bounds_cubic(delta: float, K: float) -> IntervalBounds:
    """λ = 2: roots of t³ - 3t - 2(3k - 1) with k = K/δ.

    Three real roots when δ > 1.5K (trigonometric form), a double root at
    t = -1 when δ = 1.5K, one real root (Cardano) below that. A positive lower
    root exists only for k < 1/3. Both roots are refined as s²(s + 3) = 6k.
    """
    point = _check_inputs(delta, K)
    if point:
        return point
    k = K / delta
    if delta >= 1.5 * K:
        theta = np.arccos(np.clip(3.0 * k - 1.0, -1.0, 1.0))
        roots = np.sort(2.0 * np.cos(theta / 3.0 - 2.0 * np.pi * np.arange(3) / 3.0))
        lower_t, upper_t = roots[1], roots[2]
    else:
        a = np.cbrt(3.0 * k - 1.0 + np.sqrt(9.0 * k * k - 6.0 * k))
        lower_t, upper_t = -1.0, a + 1.0 / a
    upper_t = 1.0 + _offset_root(_cubic_offset, upper_t - 1.0,
                                 min(np.sqrt(2.0 * k), np.cbrt(6.0 * k)), 6.0 * k)
    if k < 1.0 / 3.0:
        lower_t = 1.0 + _offset_root(_cubic_offset, lower_t - 1.0, -np.sqrt(3.0 * k), 6.0 * k)
    else:
        lower_t = 0.0
    return _scaled(delta, K, lower_t, upper_t)


def bounds_quartic(delta: float, K: float) -> IntervalBounds:
    """λ = 3: t⁴ - 4t - 3(4k - 1) is convex with exactly two real roots around t = 1.

    Companion-matrix roots seed a refinement of s²(s² + 4s + 6) = 12k. The
    lower root is positive only for k < 1/4.
    """
    point = _check_inputs(delta, K)
    if point:
        return point
    k = K / delta
    roots = np.roots([1.0, 0.0, 0.0, -4.0, -3.0 * (4.0 * k - 1.0)])
    real = np.sort(roots[np.abs(roots.imag) <= 1e-6 * np.maximum(1.0, np.abs(roots))].real)
    lower_t, upper_t = (real[0], real[-1]) if real.size >= 2 else (np.nan, np.nan)
    upper_t = 1.0 + _offset_root(_quartic_offset, upper_t - 1.0,
                                 min(np.sqrt(2.0 * k), (12.0 * k) ** 0.25), 12.0 * k)
    if k < 0.25:
        lower_t = 1.0 + _offset_root(_quartic_offset, lower_t - 1.0, -2.0 * np.sqrt(k), 12.0 * k)
    else:
        lower_t = 0.0
    return _scaled(delta, K, lower_t, upper_t)


def bounds_general(delta: float, K: float, lam: float) -> IntervalBounds:
    """Bounds for any λ by root search in u = log(y/δ).

    The upper bracket doubles y/δ until the loss exceeds K. Below δ a root
    exists only when L(δ, 0⁺) > K; otherwise the interval starts at 0.
    """
    point = _check_inputs(delta, K)
    if point:
        return point
    k = K / delta
    # roots sit near |u| ≈ √(2k) when k is small
    xtol = ROOT_XTOL * min(1.0, float(np.sqrt(2.0 * k)))

    def excess(u: float) -> float:
        return float(pdl_loss(1.0, np.exp(u), lam)) - k

    step = np.log(2.0)
    upper = None
    for j in range(1, MAX_DOUBLINGS + 1):
        if excess(j * step) >= 0:
            upper = brentq(excess, (j - 1) * step, j * step, xtol=xtol,
                           maxiter=ROOT_MAXITER)
            break
    if upper is None:
        raise SolverError(f"No upper bound below 2^{MAX_DOUBLINGS}·δ (δ={delta:g}, K={K:g}, λ={lam:g})")

    lower = None
    if pdl_loss_limit_at_zero(1.0, lam) > k:
        hi, lo = 0.0, -1.0
        while lo > LOG_FLOOR and excess(lo) < 0:
            hi, lo = lo, max(2.0 * lo, LOG_FLOOR)
        if excess(lo) >= 0:
            lower = brentq(excess, lo, hi, xtol=xtol, maxiter=ROOT_MAXITER)

    if lower is None:
        return IntervalBounds(0.0, delta * float(np.exp(upper)), one_sided=True, cutoff=K)
    return IntervalBounds(delta * float(np.exp(lower)), delta * float(np.exp(upper)),
                          one_sided=False, cutoff=K)


def solve_bounds(delta: float, K: float, lam: float) -> IntervalBounds:
    """Closed forms for λ ∈ {1, 2, 3}, root search otherwise."""
    for target, solver in ((1.0, bounds_quadratic), (2.0, bounds_cubic), (3.0, bounds_quartic)):
        if abs(lam - target) < BRANCH_TOL:
            return solver(delta, K)
    return bounds_general(delta, K, lam)


def conditional_cutoffs(model: LogGaussianModel, site: Location, lambdas, alpha: float,
                        m: int, seed: int, stream: int = 0) -> dict[float, Cutoff]:
    """Cut-offs under [Y(s₀) | Z] for several λ from one set of predictive draws."""
    law = predictive_law(model, site)
    draws = sample_predictive(model, site, m, seed, stream).draws
    cutoffs = {}
    for lam in lambdas:
        losses = pdl_loss(opd_predict(law, lam), draws, lam)
        cutoffs[lam] = Cutoff(cutoff_from_losses(losses, alpha), alpha,
                              IntervalKind.CONDITIONAL, m)
    return cutoffs


def unconditional_cutoffs(model: LogGaussianModel, site: Location, lambdas, alpha: float,
                          m: int, seed: int, stream: int = 0) -> dict[float, Cutoff]:
    """Cut-offs under the joint law of (Y(s₀), Z), predictors recomputed on each simulated Z.

    β and θ stay at their plug-in values; only the conditioning data change, so
    log δ(z) = x'β - ½σ²_W + w'(log z - E Z̃) + ½(λ+1)v with w = Σ⁻¹c.
    """
    law = predictive_law(model, site)
    weights, _ = kriging_weights(model, site)
    base = law.mu - float(weights @ model.centered)
    expected = model.expected_log_data()
    rng = substream(seed, stream)

    losses: dict[float, list[np.ndarray]] = {lam: [] for lam in lambdas}
    for log_y0, log_z in iter_joint(model, site, m, rng):
        log_mean = base + (log_z - expected) @ weights
        y0 = np.exp(log_y0)
        for lam in lambdas:
            delta = np.exp(log_mean + 0.5 * (lam + 1.0) * law.v)
            losses[lam].append(pdl_loss(delta, y0, lam))
    return {lam: Cutoff(cutoff_from_losses(np.concatenate(parts), alpha), alpha,
                        IntervalKind.UNCONDITIONAL, m)
            for lam, parts in losses.items()}


def _cutoffs(kind: IntervalKind, model: LogGaussianModel, site: Location, lambdas,
             alpha: float, m: int, seed: int, stream: int) -> dict[float, Cutoff]:
    if kind is IntervalKind.CONDITIONAL:
        return conditional_cutoffs(model, site, lambdas, alpha, m, seed, stream)
    return unconditional_cutoffs(model, site, lambdas, alpha, m, seed, stream)


def conditional_interval(model: LogGaussianModel, site: Location, lam: float, alpha: float,
                         m: int, seed: int, stream: int = 0) -> tuple[IntervalBounds, Cutoff]:
    cutoff = conditional_cutoffs(model, site, [lam], alpha, m, seed, stream)[lam]
    delta = opd_predict(predictive_law(model, site), lam)
    return solve_bounds(delta, cutoff.value, lam), cutoff


def unconditional_interval(model: LogGaussianModel, site: Location, lam: float, alpha: float,
                           m: int, seed: int, stream: int = 0) -> tuple[IntervalBounds, Cutoff]:
    cutoff = unconditional_cutoffs(model, site, [lam], alpha, m, seed, stream)[lam]
    delta = opd_predict(predictive_law(model, site), lam)
    return solve_bounds(delta, cutoff.value, lam), cutoff


def gaussian_sel_cutoffs(model: LogGaussianModel, site: Location, alpha: float, m: int,
                         seed: int, stream: int = 0) -> tuple[Cutoff, Cutoff]:
    """Squared-error cut-offs for the Gaussian log process W(s₀).

    Both estimate v·χ²₁(1 - α); with Gaussian data the two interval
    constructions coincide.
    """
    law = predictive_law(model, site)
    rng = substream(seed, stream)
    draws = law.mu + np.sqrt(law.v) * rng.standard_normal(m)
    conditional = Cutoff(cutoff_from_losses((draws - law.mu) ** 2, alpha), alpha,
                         IntervalKind.CONDITIONAL, m)

    weights, _ = kriging_weights(model, site)
    base = law.mu - float(weights @ model.centered)
    expected = model.expected_log_data()
    rng = substream(seed, stream + 1)
    losses = [(log_y0 - base - (log_z - expected) @ weights) ** 2
              for log_y0, log_z in iter_joint(model, site, m, rng)]
    unconditional = Cutoff(cutoff_from_losses(np.concatenate(losses), alpha), alpha,
                           IntervalKind.UNCONDITIONAL, m)
    return conditional, unconditional


def gaussian_sel_interval(mu: float, cutoff: float) -> tuple[float, float]:
    """{w : (w - μ)² ≤ K} on the log scale."""
    half = float(np.sqrt(cutoff))
    return mu - half, mu + half


def gaussian_reference_cutoff(v: float, alpha: float) -> float:
    return float(v * chi2.ppf(1.0 - alpha, df=1))


def _site_model(model: LogGaussianModel, i: int, refit: FitConfig | None) -> LogGaussianModel:
    held_out = model.drop_site(i)
    if refit is None:
        return held_out
    fit = iterative_gls_fit(held_out.dataset, model.theta.sigma2_eps, refit)
    return LogGaussianModel(held_out.dataset, fit.beta, fit.theta)


def loocv_coverage(model: LogGaussianModel, lambdas, alpha: float, kind: IntervalKind,
                   m: int, seed: int, refit: FitConfig | None = None) -> list[CoverageResult]:
    """Leave-one-out coverage of Z(sᵢ) by the interval built from Z₋ᵢ, one result per λ.

    Parameters stay at the full-data estimates unless `refit` is given, in which
    case β and θ are re-estimated on every Z₋ᵢ. Site i draws from substream i,
    shared by all λ.
    """
    n = model.dataset.n
    if n < 10:
        raise DomainError(f"LOOCV needs at least 10 sites, got {n}")
    lambdas = [float(lam) for lam in lambdas]
    hits = {lam: np.zeros(n, dtype=bool) for lam in lambdas}

    click.echo(f"LOOCV ({kind.value}) over {n} sites, {len(lambdas)} λ values, M={m:,}")
    t0 = time.time()
    for i in range(n):
        site = model.site(i)
        try:
            held_out = _site_model(model, i, refit)
            law = predictive_law(held_out, site)
            cutoffs = _cutoffs(kind, held_out, site, lambdas, alpha, m, seed, stream=i)
            for lam in lambdas:
                bounds = solve_bounds(opd_predict(law, lam), cutoffs[lam].value, lam)
                hits[lam][i] = bounds.contains(model.dataset.values[i])
        except OpdError as exc:
            raise EstimationError(f"LOOCV failed at site {i} "
                                  f"({site.coords[0]:g}, {site.coords[1]:g}): {exc}") from exc
        if (i + 1) % 25 == 0 or i + 1 == n:
            click.echo(f"  [{i + 1}/{n}] sites ({time.time() - t0:.1f}s)")

    results = [CoverageResult(lam, kind, float(hits[lam].mean()), hits[lam]) for lam in lambdas]
    click.echo("  done (" + ", ".join(f"λ={r.lam:g}: {r.coverage:.3f}" for r in results) + ")")
    return results


def _narrowest(lambdas: list[float], widths: np.ndarray) -> float:
    """Grid minimiser; ties go to the smaller |λ|, then the smaller λ."""
    best = widths.min()
    tied = [lam for lam, w in zip(lambdas, widths) if np.isclose(w, best, rtol=1e-12, atol=0.0)]
    return min(tied, key=lambda lam: (abs(lam), lam))


def select_lambda_by_width(model: LogGaussianModel, sites: list[Location], lambda_grid,
                           alpha: float, m: int, seed: int) -> LambdaSelection:
    """Median over sites of the λ giving the narrowest unconditional interval.

    An even number of sites takes the lower median.
    """
    grid = sorted(float(lam) for lam in lambda_grid)
    if len(grid) < 2:
        raise DomainError("The λ grid needs at least two values")
    if not sites:
        raise DomainError("At least one location is required")

    click.echo(f"Selecting λ by interval width at {len(sites)} sites over {len(grid)} values")
    chosen = []
    for j, site in enumerate(sites):
        t0 = time.time()
        law = predictive_law(model, site)
        cutoffs = unconditional_cutoffs(model, site, grid, alpha, m, seed, stream=j)
        widths = np.array([solve_bounds(opd_predict(law, lam), cutoffs[lam].value, lam).width
                           for lam in grid])
        chosen.append(_narrowest(grid, widths))
        click.echo(f"  [{j + 1}/{len(sites)}] λ*={chosen[-1]:g} ({time.time() - t0:.1f}s)")

    median = sorted(chosen)[(len(chosen) - 1) // 2]
    click.echo(f"  done (median λ* = {median:g})")
    return LambdaSelection(median, chosen)
