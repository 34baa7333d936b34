"""If-then valuation rules of carryover storage and their MILP embedding."""

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .builder import LinExpr, ModelBuilder, Var, lin_sum
from .exceptions import BigMError, InputError
from .polytope import Polytope
from .solver import Vector

_logger = logging.getLogger(__name__)


class Inequality(BaseModel):
    """e'theta + f <= 0."""

    e: list[float]
    f: float


class AffinePiece(BaseModel):
    """J(theta) = a'theta + g."""

    a: list[float]
    g: float

    def __call__(self, theta: Vector) -> float:
        return float(np.dot(self.a, theta) + self.g)


class CriticalRegion(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    ineqs: list[Inequality]
    y_star: list[int]
    pi: list[float]  # MWh/Mm3 per reservoir
    value: AffinePiece
    # Multipliers of the end-storage-lower rows at the region center, when tagged.
    raw_duals: list[float] | None = None
    center: list[float] = []
    radius: float = 0.0
    # Alternative optimal duals exist at the center.
    degenerate: bool = False

    @cached_property
    def polytope(self) -> Polytope:
        return Polytope.from_json(
            [i.model_dump() for i in self.ineqs], dim=len(self.pi)
        )

    def contains(self, theta: Vector, tol: float | None = None) -> bool:
        return self.polytope.contains(theta, tol)


class RulesMeta(BaseModel):
    system: str = ""
    reservoir_ids: list[str] = []
    forecast_hash: str | None = None
    L: int | None = None
    omega: float | None = None
    seed: int | None = None
    explorations: int = 0
    lp_solves: int = 0
    dropped_regions: int = 0
    wall_time: float = 0.0  # seconds


class ValuationRules(BaseModel):
    regions: list[CriticalRegion]
    v_min: list[float]
    v_max: list[float]
    meta: RulesMeta = RulesMeta()

    @property
    def dim(self) -> int:
        return len(self.v_min)

    def mean_pi(self) -> list[float]:
        """Average LMWV per reservoir over the regions."""
        if not self.regions:
            return [0.0] * self.dim
        mean = np.mean([r.pi for r in self.regions], axis=0)
        return [float(v) for v in mean]


def save_rules(rules: ValuationRules, path: Path) -> None:
    """Write the rules as JSON, leaving out the wall time."""
    path.write_text(rules.model_dump_json(indent=2, exclude={"meta": {"wall_time"}}))


def load_rules(path: Path) -> ValuationRules:
    try:
        return ValuationRules.model_validate_json(path.read_text())
    except OSError as e:
        raise InputError(f"Cannot read rules file {path}: {e}") from e
    except ValidationError as e:
        raise InputError(f"Invalid rules file {path}: {e}") from e


def locate_region(rules: ValuationRules, storage: Vector) -> CriticalRegion:
    """The lowest-id region containing the storage, else the nearest one."""
    storage = np.asarray(storage, dtype=float)
    regions = sorted(rules.regions, key=lambda r: r.id)
    for region in regions:
        if region.contains(storage):
            return region
    nearest = min(regions, key=lambda r: r.polytope.violation(storage))
    _logger.warning(
        f"No region contains {storage.tolist()}, using nearest region {nearest.id}."
    )
    return nearest


def evaluate_rules(rules: ValuationRules, storage: Vector) -> float:
    """Future value F of a carryover storage vector, MWh."""
    region = locate_region(rules, storage)
    return float(np.dot(region.pi, np.asarray(storage) - np.asarray(rules.v_min)))


class ExhaustivenessReport(BaseModel):
    points: int
    uncovered: int
    overlapping: int


def check_exhaustive(
    rules: ValuationRules, points: int = 10_000, seed: int = 0
) -> ExhaustivenessReport:
    """Count sampled box points in no region, and in several regions."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(rules.v_min), np.asarray(rules.v_max)
    samples = lo + rng.random((points, rules.dim)) * (hi - lo)
    uncovered = overlapping = 0
    for theta in samples:
        hits = sum(1 for r in rules.regions if r.contains(theta))
        uncovered += hits == 0
        overlapping += hits > 1
    return ExhaustivenessReport(
        points=points, uncovered=uncovered, overlapping=overlapping
    )


@dataclass(frozen=True)
class RulesBlock:
    """The future value and region indicators embedded into a model."""

    value: LinExpr
    indicators: tuple[Var, ...]


def _row_bound(e: Vector, f: float, lo: Vector, hi: Vector) -> float:
    """Largest e'V + f over the box, by interval arithmetic."""
    return float(np.sum(np.maximum(e * lo, e * hi)) + f)


def emit_milp_constraints(
    rules: ValuationRules,
    builder: ModelBuilder,
    storage: Sequence[LinExpr | Var],
    big_m: float | None = None,
) -> RulesBlock:
    """Rows selecting exactly one region for the storage and valuing it.

    ``storage`` holds the carryover storage of every reservoir as expressions of
    ``builder``. Each region's inequalities are relaxed by their largest value over
    the storage box when the region is not selected.
    """
    lo, hi = np.asarray(rules.v_min), np.asarray(rules.v_max)
    exprs = [LinExpr.of(v) for v in storage]
    for n, v in enumerate(exprs):
        builder.add_ge(v, lo[n], f"rules:storage-lower[{n}]")
        builder.add_le(v, hi[n], f"rules:storage-upper[{n}]")
    indicators = tuple(builder.add_binary(f"region[{r.id}]") for r in rules.regions)
    builder.add_eq(lin_sum(indicators), 1.0, "rules:one-region")
    value = LinExpr()
    for region, z in zip(rules.regions, indicators, strict=True):
        for o, ineq in enumerate(region.ineqs):
            e = np.asarray(ineq.e)
            needed = _row_bound(e, ineq.f, lo, hi)
            if needed <= 0:
                continue
            m = needed
            if big_m is not None:
                if big_m < needed:
                    raise BigMError(
                        f"big-M {big_m} is below {needed} for region {region.id}."
                    )
                m = big_m
            lhs = lin_sum(float(e_n) * v for e_n, v in zip(e, exprs, strict=True))
            builder.add_le(
                lhs + ineq.f, m * (1 - z.expr()), f"rules:region[{region.id},{o}]"
            )
        for n, (pi, v) in enumerate(zip(region.pi, exprs, strict=True)):
            if pi == 0:
                continue
            w = builder.linearize_product(
                z, v, float(hi[n]), f"rules:storage[{region.id},{n}]"
            )
            value = value + pi * (w - float(lo[n]) * z.expr())
    return RulesBlock(value=value, indicators=indicators)


def export_surface_csv(
    rows: Sequence[tuple[Sequence[float], int, float]],
    path: Path,
    ids: Sequence[str],
) -> None:
    """Write (theta, region id, F) rows with one theta column per reservoir."""
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([*(f"theta_{rid}" for rid in ids), "region_id", "F_mwh"])
        for theta, region_id, value in rows:
            writer.writerow([*theta, region_id, value])
