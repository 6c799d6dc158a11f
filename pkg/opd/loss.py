"""Power-divergence loss, the classical losses, and multiplicative asymmetry.

All evaluations go through the log-ratio log(y/δ) so that extreme ratios do
not overflow before the loss itself does.
"""

import numpy as np

from data.models import ClassicalLoss, ClassicalLossKind, LossEvaluation
from opd.errors import DomainError

BRANCH_TOL = 1e-12  # |λ| or |λ+1| below this selects the λ=0 / λ=-1 branch
SERIES_RADIUS = 1e-3  # |y/δ - 1|·max(1,|λ|) below this uses the expansion about 1


def is_zero_branch(lam: float) -> bool:
    return abs(lam) < BRANCH_TOL


def is_minus_one_branch(lam: float) -> bool:
    return abs(lam + 1.0) < BRANCH_TOL


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not np.isfinite(lam):
        raise DomainError(f"λ must be finite, got {lam}")
    return lam


def _phi_plus_near_one(t, lam: float):
    """φ⁺(1 + t) to fifth order; φ⁺''(x) = x^(λ-1) for every branch."""
    a = lam - 1.0
    b = a * (lam - 2.0)
    c = b * (lam - 3.0)
    return 0.5 * t * t * (1.0 + a * t / 3.0 + b * t * t / 12.0 + c * t ** 3 / 60.0)


def pdl_loss(delta, y, lam: float):
    """Power-divergence loss L(δ, y) for predictor δ > 0 and predictand y > 0.

    Broadcasts over arrays. Zero iff δ = y.
    """
    lam = _check_lambda(lam)
    delta = np.asarray(delta, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(delta <= 0) or np.any(y <= 0):
        raise DomainError("pdl_loss needs positive predictor and predictand")

    with np.errstate(over="ignore", invalid="ignore"):
        log_ratio = np.log(y) - np.log(delta)
        if is_zero_branch(lam):
            value = y * log_ratio - (y - delta)
        elif is_minus_one_branch(lam):
            value = y - delta - delta * log_ratio
        else:
            value = (y * np.expm1(lam * log_ratio) - lam * (y - delta)) / (lam * (lam + 1.0))

        near = np.abs(log_ratio) * max(1.0, abs(lam)) < SERIES_RADIUS
        if np.any(near):
            series = delta * _phi_plus_near_one(np.expm1(log_ratio), lam)
            value = np.where(near, series, value)

    value = np.maximum(value, 0.0)
    return value[()] if value.ndim == 0 else value


def evaluate_loss(delta: float, y: float, lam: float) -> LossEvaluation:
    return LossEvaluation(float(delta), float(y), float(pdl_loss(delta, y, lam)))


def pdl_loss_limit_at_zero(delta: float, lam: float) -> float:
    """lim L(δ, y) as y → 0⁺: δ/(λ+1) for λ > -1, +∞ otherwise."""
    lam = _check_lambda(lam)
    if lam + 1.0 <= BRANCH_TOL:
        return np.inf
    return delta / (lam + 1.0)


def phi_plus(x, lam: float):
    """φ⁺(x) = φ(x) - φ'(1)(x - 1), with L(δ, y) = δ·φ⁺(y/δ).

    φ⁺(0) is 1/(λ+1) for λ > -1 and +∞ for λ ≤ -1.
    """
    lam = _check_lambda(lam)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("phi_plus is defined for x ≥ 0 only")
    at_zero = x == 0
    safe = np.where(at_zero, 1.0, x)
    value = np.asarray(pdl_loss(1.0, safe, lam), dtype=float)
    if np.any(at_zero):
        value = np.where(at_zero, pdl_loss_limit_at_zero(1.0, lam), value)
    return value[()] if value.ndim == 0 else value


def classical_loss(loss: ClassicalLoss, delta, y):
    delta = np.asarray(delta, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(delta <= 0) or np.any(y <= 0):
        raise DomainError("classical_loss needs positive predictor and predictand")
    diff = delta - y
    if loss.kind is ClassicalLossKind.SEL:
        value = diff ** 2
    elif loss.kind is ClassicalLossKind.AEL:
        value = np.abs(diff)
    elif loss.kind is ClassicalLossKind.ARL:
        value = np.abs(diff / y)
    else:
        value = diff * ((diff > 0).astype(float) - loss.q)
    return value[()] if value.ndim == 0 else value


def _check_fraction(f):
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0) or np.any(f >= 1):
        raise DomainError("f must lie strictly inside (0, 1)")
    return f


def asymmetry_pdl(f, lam: float):
    """A(f): loss of f×100% under-prediction over f×100% over-prediction.

    Small f goes through the expansion of φ⁺ about 1, where the closed forms
    cancel catastrophically.
    """
    lam = _check_lambda(lam)
    f = _check_fraction(f)
    g = 1.0 - f
    log_g = np.log1p(-f)

    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if is_zero_branch(lam):
            value = -(g * log_g + f * g) / (g * log_g + f)
        elif is_minus_one_branch(lam):
            value = -(g * g * log_g + f * g) / (log_g + f)
        else:
            num = np.exp((1.0 - lam) * log_g) - g * (1.0 + lam * f)
            den = np.exp((lam + 1.0) * log_g) + (lam + 1.0) * f - 1.0
            value = num / den

        small = f * max(1.0, abs(lam)) < SERIES_RADIUS
        if np.any(small):
            series = (_phi_plus_near_one(f / g, lam)
                      / _phi_plus_near_one(-f, lam)) * g * g
            value = np.where(small, series, value)

    return value[()] if value.ndim == 0 else value


def asymmetry_classical(loss: ClassicalLoss, f):
    f = _check_fraction(f)
    if loss.kind is ClassicalLossKind.SEL:
        value = (1.0 - f) ** 2
    elif loss.kind is ClassicalLossKind.QTL:
        value = (1.0 - f) * loss.q / (1.0 - loss.q)
    else:
        value = 1.0 - f
    return value[()] if value.ndim == 0 else value
