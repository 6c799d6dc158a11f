from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from opd.errors import ConfigurationError, DomainError

MIN_DRAWS = 1000  # smallest M a CLI run accepts


class ClassicalLossKind(Enum):
    SEL = "sel"
    AEL = "ael"
    ARL = "arl"
    QTL = "qtl"


class SampleSource(Enum):
    CONDITIONAL = "conditional"
    JOINT = "joint"


class IntervalKind(Enum):
    CONDITIONAL = "conditional"
    UNCONDITIONAL = "unconditional"


class TermKind(Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "cat"
    STANDARDIZED = "std"


class LambdaModeKind(Enum):
    CONSTANT = "constant"
    CALIBRATE = "calibrate"
    SELECT_BY_WIDTH = "select-by-width"


@dataclass(frozen=True)
class ClassicalLoss:
    """One of the classical losses; `q` only for the quantile (tick) loss."""
    kind: ClassicalLossKind
    q: float | None = None

    def __post_init__(self):
        if self.kind is ClassicalLossKind.QTL:
            if self.q is None or not 0.0 < self.q < 1.0:
                raise ConfigurationError(f"QTL needs q strictly inside (0, 1), got {self.q}")
        elif self.q is not None:
            raise ConfigurationError(f"{self.kind.name} takes no q parameter")

    @classmethod
    def parse(cls, text: str) -> "ClassicalLoss":
        """Parse 'SEL', 'AEL', 'ARL' or 'QTL:0.25'."""
        name, _, param = text.strip().partition(":")
        try:
            kind = ClassicalLossKind(name.strip().lower())
        except ValueError:
            raise ConfigurationError(f"Unknown classical loss '{name}'") from None
        if not param:
            return cls(kind)
        try:
            return cls(kind, float(param))
        except ValueError:
            raise ConfigurationError(f"Invalid loss parameter in '{text}'") from None

    @property
    def label(self) -> str:
        return self.kind.name if self.q is None else f"{self.kind.name}:{self.q:g}"


@dataclass(frozen=True)
class LossEvaluation:
    predictor: float
    predictand: float
    value: float


@dataclass(eq=False)
class SpatialDataset:
    """Observation sites, positive measurements and the n×p covariate matrix."""
    locations: np.ndarray
    values: np.ndarray
    covariates: np.ndarray
    covariate_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        self.values = np.asarray(self.values, dtype=float).ravel()
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates[:, None]
        n = self.values.size
        if n < 1:
            raise DomainError("A dataset needs at least one observation")
        if self.locations.shape[0] != n or self.covariates.shape[0] != n:
            raise DomainError(
                f"Shape mismatch: {self.locations.shape[0]} locations, {n} values, "
                f"{self.covariates.shape[0]} covariate rows"
            )
        if np.any(~np.isfinite(self.values)) or np.any(self.values <= 0):
            raise DomainError("All measurements must be positive and finite")
        if self.covariates.shape[1] > n:
            raise DomainError(f"{self.covariates.shape[1]} covariates exceed {n} observations")
        if np.unique(self.locations, axis=0).shape[0] != n:
            raise DomainError("Duplicate observation locations; average or drop them before fitting")
        if not self.covariate_names:
            self.covariate_names = [f"x{k}" for k in range(self.covariates.shape[1])]

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def log_values(self) -> np.ndarray:
        return np.log(self.values)

    def subset(self, keep: np.ndarray) -> "SpatialDataset":
        return SpatialDataset(self.locations[keep], self.values[keep],
                              self.covariates[keep], list(self.covariate_names))


@dataclass(eq=False)
class DuplicatePairs:
    """Replicated measurements (z1, z2) taken at the same site."""
    pairs: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=float).reshape(-1, 2)
        if self.pairs.shape[0] < 1:
            raise DomainError("At least one duplicate pair is required")
        if np.any(self.pairs <= 0):
            raise DomainError("Duplicate measurements must be positive")


@dataclass(frozen=True)
class CovarianceParams:
    """Spherical partial sill, range, microscale and measurement-error variances."""
    sigma2_eta: float
    range_r: float
    sigma2_xi: float = 0.0
    sigma2_eps: float = 0.0

    def __post_init__(self):
        if min(self.sigma2_eta, self.sigma2_xi, self.sigma2_eps) < 0:
            raise DomainError("Variance parameters must be nonnegative")
        if not self.range_r > 0:
            raise DomainError(f"Range must be positive, got {self.range_r}")

    @property
    def sigma2_w(self) -> float:
        return self.sigma2_eta + self.sigma2_xi

    @property
    def nugget(self) -> float:
        return self.sigma2_xi + self.sigma2_eps


@dataclass(eq=False)
class EmpiricalSemivariogram:
    """Binned semivariogram: mean lag, γ̂ and pair count per retained bin."""
    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return self.lags.size

    def rows(self) -> list[dict]:
        return [{"lag": float(h), "gamma": float(g), "pairs": int(c)}
                for h, g, c in zip(self.lags, self.gamma, self.counts)]


@dataclass(frozen=True)
class WlsFit:
    partial_sill: float
    range_r: float
    nugget: float
    objective: float
    iterations: int = 0


@dataclass
class GlsIteration:
    iteration: int
    beta: list[float]
    theta: CovarianceParams
    objective: float
    max_change: float


@dataclass(eq=False)
class GlsFit:
    """Result of the iterated GLS / semivariogram workflow."""
    beta: np.ndarray
    beta_ci: np.ndarray  # (p, 2) lower/upper
    theta: CovarianceParams
    semivariogram: EmpiricalSemivariogram
    wls: WlsFit
    trace: list[GlsIteration] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace)


@dataclass(eq=False)
class Location:
    """A prediction site: coordinates and its covariate row x(s₀)."""
    coords: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).ravel()
        self.covariates = np.asarray(self.covariates, dtype=float).ravel()


@dataclass(frozen=True)
class PredictiveLaw:
    """Log-scale law of [W(s₀) | Z̃]: mean mu, variance v."""
    mu: float
    v: float
    x0_beta: float
    csc: float
    sigma2_w: float


@dataclass(frozen=True)
class PredictorMoments:
    mean: float
    variance: float
    log_mean: float
    log_var: float


@dataclass(eq=False)
class PredictiveSamples:
    draws: np.ndarray
    seed: int
    source: SampleSource = SampleSource.CONDITIONAL

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float).ravel()
        if self.draws.size < 1:
            raise DomainError("At least one draw is required")
        if np.any(self.draws <= 0):
            raise DomainError("Predictive draws must be positive")


@dataclass(eq=False)
class JointSamples:
    """Joint draws of the predictand y0 (M,) and the data z (M, n)."""
    y0: np.ndarray
    z: np.ndarray
    seed: int


@dataclass(eq=False)
class BlockSpec:
    """Quadrature points inside a block B and their weights."""
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.size < 1 or self.weights.size != self.points.shape[0]:
            raise DomainError("A block needs one positive weight per quadrature point")
        if np.any(self.weights <= 0):
            raise DomainError("Block weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError(f"Block weights sum to {self.weights.sum():.15g}, not 1")

    @classmethod
    def rectangle(cls, xmin: float, xmax: float, ymin: float, ymax: float,
                  nx: int, ny: int) -> "BlockSpec":
        """Midpoint rule on an nx × ny grid over a rectangle."""
        xs = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
        ys = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
        gx, gy = np.meshgrid(xs, ys)
        points = np.column_stack([gx.ravel(), gy.ravel()])
        return cls(points, np.full(points.shape[0], 1.0 / points.shape[0]))


@dataclass(frozen=True)
class Cutoff:
    value: float
    alpha: float
    kind: IntervalKind
    m_used: int


@dataclass(frozen=True)
class IntervalBounds:
    """Prediction-interval bounds (l, u); lower = 0 when no root exists below δ."""
    lower: float
    upper: float
    one_sided: bool = False
    cutoff: float = 0.0

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


@dataclass
class CoverageResult:
    lam: float
    kind: IntervalKind
    coverage: float
    per_site: np.ndarray


@dataclass
class LambdaSelection:
    median: float
    per_site: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class LambdaMode:
    """How λ is chosen for a run: a constant, calibrate:q, or select-by-width."""
    kind: LambdaModeKind
    value: float | None = None

    def describe(self) -> str:
        if self.kind is LambdaModeKind.CONSTANT:
            return f"{self.value:g}"
        if self.kind is LambdaModeKind.CALIBRATE:
            return f"calibrate:{self.value:g}"
        return self.kind.value


@dataclass(frozen=True)
class CovariateTerm:
    name: str
    kind: TermKind = TermKind.NUMERIC


@dataclass
class CovariateSpec:
    """Covariate columns and the constants learned when the design was first built."""
    terms: list[CovariateTerm] = field(default_factory=list)
    levels: dict[str, list[str]] = field(default_factory=dict)
    scaling: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str | None) -> "CovariateSpec":
        """Parse 'dist,soil:cat,ffreq:cat,x:std'."""
        terms = []
        for token in (text or "").split(","):
            token = token.strip()
            if not token:
                continue
            name, _, kind = token.partition(":")
            try:
                term_kind = TermKind(kind.strip().lower()) if kind else TermKind.NUMERIC
            except ValueError:
                raise ConfigurationError(f"Unknown covariate kind '{kind}' in '{token}'") from None
            terms.append(CovariateTerm(name.strip(), term_kind))
        names = [t.name for t in terms]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Covariate listed twice in '{text}'")
        return cls(terms)

    def describe(self) -> str:
        return ",".join(t.name if t.kind is TermKind.NUMERIC else f"{t.name}:{t.kind.value}"
                        for t in self.terms)


@dataclass
class FitConfig:
    """Semivariogram binning and GLS iteration settings."""
    n_bins: int = 15
    max_lag_fraction: float = 0.5
    min_pairs: int = 30
    tol: float = 1e-6
    max_iter: int = 50
    initial: CovarianceParams | None = None

    def __post_init__(self):
        if self.n_bins < 1 or self.min_pairs < 1 or self.max_iter < 1:
            raise ConfigurationError("n_bins, min_pairs and max_iter must be positive")
        if not 0 < self.max_lag_fraction <= 1:
            raise ConfigurationError("max_lag_fraction must lie in (0, 1]")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")


@dataclass
class RunConfig:
    """Monte Carlo and λ settings shared by the prediction commands."""
    lambda_mode: LambdaMode
    alpha: float = 0.05
    m: int = 100_000
    seed: int = 42

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.m < MIN_DRAWS:
            raise ConfigurationError(f"M must be at least {MIN_DRAWS}, got {self.m}")


@dataclass
class PredictionRow:
    """One grid site of a prediction report (raw and exp{x'β}-normalised fields)."""
    x: float
    y: float
    lam: float | None = None
    delta: float | None = None
    bias: float | None = None
    rmspe: float | None = None
    elp: float | None = None
    elj: float | None = None
    lower: float | None = None
    upper: float | None = None
    normaliser: float | None = None
    error: str = ""

    def normalised(self, value: float | None) -> float | None:
        if value is None or self.normaliser is None:
            return None
        return value / self.normaliser
