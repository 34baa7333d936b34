import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from pydantic import (
    BaseModel,
    ConfigDict,
    ValidationError,
    field_validator,
    model_validator,
)
from scipy.special import ndtr
from scipy.stats import norm

from .exceptions import ForecastInvalid, InputError, QuantileNotConverged, UsageError
from .models import CascadeSystem

_logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]

QUANTILE_MAX_ITERATIONS = 200
# Accepted distance of the CDF to the requested level.
QUANTILE_TOLERANCE = 1e-12
# Weeks in a seasonal cycle of the synthetic forecasts.
SEASON_WEEKS = 52
# Week-to-week correlation of the synthetic forecast errors.
SYNTHETIC_CORRELATION = 0.5


def _as_matrix(raw: Any, weeks: int) -> list[list[float]]:
    values = np.asarray(raw, dtype=float)
    if values.ndim == 2:
        return values.tolist()  # type: ignore[no-any-return]
    if values.size == weeks * weeks:
        return values.reshape(weeks, weeks).tolist()  # type: ignore[no-any-return]
    if values.size == weeks:
        return np.diag(values).tolist()  # type: ignore[no-any-return]
    raise ValueError(
        f"sigma entry of size {values.size} fits neither {weeks} weeks "
        "nor their square"
    )


class ReservoirForecast(BaseModel):
    """Mixture of G Gaussians over the weekly inflows of one reservoir, Mm3/week.

    ``sigma`` accepts per component a full matrix, its row-major flattening, or the
    diagonal shorthand (one variance per week).
    """

    model_config = ConfigDict(frozen=True)

    beta: list[float]
    mu: list[list[float]]
    sigma: list[list[list[float]]]

    @model_validator(mode="before")
    @classmethod
    def expand_sigma(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("mu") and data.get("sigma") is not None:
            weeks = len(data["mu"][0])
            data = {**data, "sigma": [_as_matrix(s, weeks) for s in data["sigma"]]}
        return data

    @property
    def components(self) -> int:
        return len(self.beta)

    @property
    def weeks(self) -> int:
        return len(self.mu[0]) if self.mu else 0

    def arrays(self) -> tuple[Array, Array, Array]:
        """Weights (G), means (G x K) and covariances (G x K x K)."""
        return (
            np.asarray(self.beta, dtype=float),
            np.asarray(self.mu, dtype=float),
            np.asarray(self.sigma, dtype=float),
        )

    def mean(self) -> Array:
        """Expected inflow per week."""
        beta, mu, _ = self.arrays()
        return beta @ mu  # type: ignore[no-any-return]

    def window(self, start: int, stop: int) -> "ReservoirForecast":
        return ReservoirForecast(
            beta=self.beta,
            mu=[m[start:stop] for m in self.mu],
            sigma=[[row[start:stop] for row in s[start:stop]] for s in self.sigma],
        )


class GmmForecast(BaseModel):
    model_config = ConfigDict(frozen=True)

    reservoirs: dict[str, ReservoirForecast]

    @property
    def weeks(self) -> int:
        return min((r.weeks for r in self.reservoirs.values()), default=0)

    def get(self, reservoir_id: str) -> ReservoirForecast:
        try:
            return self.reservoirs[reservoir_id]
        except KeyError as e:
            raise ForecastInvalid(f"No forecast for reservoir {reservoir_id}.") from e

    def window(self, start: int, stop: int) -> "GmmForecast":
        """The forecast restricted to weeks [start, stop)."""
        return GmmForecast(
            reservoirs={k: r.window(start, stop) for k, r in self.reservoirs.items()}
        )


class ScalarGmm(BaseModel):
    """One-dimensional Gaussian mixture."""

    model_config = ConfigDict(frozen=True)

    beta: list[float]
    mu: list[float]
    var: list[float]

    @field_validator("var")
    def validate_var(cls, v: list[float]) -> list[float]:
        if any(x < 0 for x in v):
            raise ValueError("Variances must be nonnegative.")
        return v

    @model_validator(mode="after")
    def validate_lengths(self) -> "ScalarGmm":
        if not len(self.beta) == len(self.mu) == len(self.var) > 0:
            raise ValueError("beta, mu and var need the same nonzero length.")
        if abs(sum(self.beta) - 1) > 1e-9 or min(self.beta) < 0:
            raise ValueError("beta must be nonnegative weights summing to 1.")
        return self

    @property
    def mean(self) -> float:
        return float(np.dot(self.beta, self.mu))

    @property
    def std(self) -> Array:
        return np.sqrt(np.asarray(self.var, dtype=float))


def validate_forecast(
    forecast: GmmForecast, system: CascadeSystem | None = None, weeks: int | None = None
) -> list[str]:
    """Invariant violations of a forecast, as messages."""
    problems: list[str] = []
    for rid, r in forecast.reservoirs.items():
        beta, mu, sigma = r.arrays()
        if not r.components:
            problems.append(f"{rid}: no mixture component")
            continue
        if (beta < 0).any() or abs(beta.sum() - 1) > 1e-9:
            problems.append(f"{rid}: weights must be nonnegative and sum to 1")
        if mu.shape[0] != r.components or sigma.shape[0] != r.components:
            problems.append(f"{rid}: component count mismatch")
            continue
        k = mu.shape[1]
        if weeks is not None and k != weeks:
            problems.append(f"{rid}: {k} weeks, expected {weeks}")
        if sigma.shape[1:] != (k, k):
            problems.append(f"{rid}: covariance shape {sigma.shape[1:]}, not {(k, k)}")
            continue
        for g, s in enumerate(sigma):
            if not np.allclose(s, s.T, atol=1e-9):
                problems.append(f"{rid}: covariance {g} not symmetric")
            elif np.linalg.eigvalsh(s).min() < -1e-9 * max(1.0, np.abs(s).max()):
                problems.append(f"{rid}: covariance {g} not positive semidefinite")
    if system is not None:
        problems.extend(
            f"{rid}: missing forecast"
            for rid in system.ids
            if rid not in forecast.reservoirs
        )
    return problems


def load_forecast(
    path: Path, system: CascadeSystem | None = None, weeks: int | None = None
) -> GmmForecast:
    try:
        forecast = GmmForecast.model_validate_json(path.read_text())
    except OSError as e:
        raise InputError(f"Cannot read forecast file {path}: {e}") from e
    except ValidationError as e:
        raise InputError(f"Invalid forecast file {path}: {e}") from e
    problems = validate_forecast(forecast, system, weeks)
    if problems:
        raise ForecastInvalid("; ".join(problems))
    return forecast


def dump_forecast(forecast: GmmForecast, path: Path) -> None:
    path.write_text(forecast.model_dump_json(indent=2))


def expected_future_inflow(forecast: GmmForecast, n: str, T: int, L: int) -> float:
    """Expected total inflow of weeks T+1..T+L, Mm3."""
    return float(forecast.get(n).mean()[T : T + L].sum())


def project_affine(forecast: GmmForecast, n: str, s: npt.ArrayLike) -> ScalarGmm:
    """Distribution of s'W for the weekly inflow vector W of reservoir n."""
    r = forecast.get(n)
    s = np.asarray(s, dtype=float)
    if s.shape != (r.weeks,):
        raise UsageError(f"Selection has shape {s.shape}, expected ({r.weeks},).")
    beta, mu, sigma = r.arrays()
    var = np.einsum("i,gij,j->g", s, sigma, s)
    if var.min() < -1e-12:
        raise ForecastInvalid(f"{n}: projected variance {var.min()} is negative.")
    return ScalarGmm(
        beta=beta.tolist(), mu=(mu @ s).tolist(), var=np.maximum(var, 0.0).tolist()
    )


def gmm_cdf(g: ScalarGmm, rho: float) -> float:
    """Mixture CDF; zero-variance components are steps at their mean."""
    mu = np.asarray(g.mu)
    std = g.std
    safe = np.where(std > 0, std, 1.0)
    values = np.where(std > 0, ndtr((rho - mu) / safe), (rho >= mu).astype(float))
    return float(np.dot(g.beta, values))


def gmm_pdf(g: ScalarGmm, rho: float) -> float:
    mu = np.asarray(g.mu)
    std = g.std
    smooth = std > 0
    if not smooth.any():
        return 0.0
    values = norm.pdf(rho, loc=mu[smooth], scale=std[smooth])
    return float(np.dot(np.asarray(g.beta)[smooth], values))


def _step_quantile(g: ScalarGmm, p: float) -> float:
    order = np.argsort(g.mu, kind="stable")
    cumulative = np.cumsum(np.asarray(g.beta)[order])
    k = int(np.searchsorted(cumulative, p - 1e-15))
    return float(np.asarray(g.mu)[order][min(k, len(order) - 1)])


def gmm_quantile(g: ScalarGmm, p: float) -> float:
    """The rho with CDF(rho) = p, by safeguarded Newton iterations."""
    if not 0 < p < 1:
        raise UsageError(f"Quantile level {p} outside (0, 1).")
    std = g.std
    if not (std > 0).any():
        return _step_quantile(g, p)
    lo = min(g.mu) - 10 * std.max()
    hi = max(g.mu) + 10 * std.max()
    while gmm_cdf(g, lo) > p:
        lo -= 10 * std.max()
    while gmm_cdf(g, hi) < p:
        hi += 10 * std.max()
    x = min(max(g.mean, lo), hi)
    for _ in range(QUANTILE_MAX_ITERATIONS):
        residual = gmm_cdf(g, x) - p
        if abs(residual) <= QUANTILE_TOLERANCE:
            return x
        if residual < 0:
            lo = x
        else:
            hi = x
        if hi - lo <= 1e-15 * (1.0 + abs(x)):
            return x
        density = gmm_pdf(g, x)
        step = x - residual / density if density >= 1e-14 else math.nan
        x = step if lo < step < hi else (lo + hi) / 2
    raise QuantileNotConverged(
        f"Quantile {p} not found after {QUANTILE_MAX_ITERATIONS} iterations."
    )


def sample_inflows(
    forecast: GmmForecast, n: str, draws: int, rng: np.random.Generator
) -> Array:
    """Draws x weeks matrix of weekly inflows of reservoir n."""
    beta, mu, sigma = forecast.get(n).arrays()
    components = rng.choice(len(beta), size=draws, p=beta / beta.sum())
    samples = np.empty((draws, mu.shape[1]))
    for g in range(len(beta)):
        picked = components == g
        count = int(picked.sum())
        if count:
            samples[picked] = rng.multivariate_normal(
                mu[g], sigma[g], size=count, method="eigh"
            )
    return samples


class SeasonProfile(BaseModel):
    """Weekly base inflow of each reservoir with a seasonal swing and noise."""

    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    base_inflow: dict[str, float]  # Mm3/week
    amplitude: float = 0.3  # relative seasonal swing
    noise: float = 0.2  # relative standard deviation of a week
    phase: int = 0  # weeks

    @classmethod
    def preset(cls, kind: str, base_inflow: dict[str, float]) -> "SeasonProfile":
        """``wet``, ``dry`` or ``transition``, scaling the given base inflows."""
        factors = {"wet": (1.5, 0.25), "transition": (1.0, 0.2), "dry": (0.6, 0.15)}
        try:
            scale, noise = factors[kind]
        except KeyError as e:
            raise UsageError(f"Unknown season profile {kind}.") from e
        return cls(
            name=kind,
            base_inflow={k: v * scale for k, v in base_inflow.items()},
            noise=noise,
        )

    def weekly_mean(self, reservoir_id: str, week: int) -> float:
        base = self.base_inflow.get(reservoir_id, 0.0)
        season = 1 + self.amplitude * math.sin(
            2 * math.pi * (week + self.phase) / SEASON_WEEKS
        )
        return max(base * season, 0.0)


def synthesize_forecast(
    seed: int,
    system: CascadeSystem,
    T: int,
    L: int,
    profile: SeasonProfile,
    start_week: int = 0,
) -> GmmForecast:
    """Two-component mixture per reservoir over T+L weeks, seeded.

    The mixture mean of every week is the profile's seasonal mean. Random draws do
    not depend on the profile, so profiles differing only in scale stay ordered.
    """
    rng = np.random.default_rng(seed)
    weeks = T + L
    lags = np.abs(np.subtract.outer(np.arange(weeks), np.arange(weeks)))
    correlation = SYNTHETIC_CORRELATION**lags
    reservoirs = {}
    for rid in system.ids:
        beta1 = rng.uniform(0.3, 0.7)
        spread = rng.uniform(0.1, 0.3)
        widths = rng.uniform(0.8, 1.2, size=2)
        mean = np.array(
            [profile.weekly_mean(rid, start_week + k) for k in range(weeks)]
        )
        mu = [
            mean * (1 - spread * (1 - beta1)),
            mean * (1 + spread * beta1),
        ]
        sigma = []
        for width in widths:
            std = width * profile.noise * mean
            sigma.append((correlation * np.outer(std, std)).tolist())
        reservoirs[rid] = ReservoirForecast(
            beta=[beta1, 1 - beta1], mu=[m.tolist() for m in mu], sigma=sigma
        )
    _logger.debug(f"Synthesized {profile.name} forecast over {weeks} weeks.")
    return GmmForecast(reservoirs=reservoirs)
