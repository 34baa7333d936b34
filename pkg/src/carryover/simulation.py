"""Rolling-horizon simulation, generated cases and studies of the valuation rules.

A simulation advances T weeks per cycle. Each cycle values the carryover storage
over the following L weeks, plans the current period against those rules, and
replays the plan's target under the realized inflows of a truth process.
"""

import csv
import logging
import time
from collections.abc import Sequence
from enum import Enum
from pathlib import Path
from typing import Protocol
from weakref import WeakSet

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .engine import partition_then_extract
from .exceptions import SimulationError, UsageError
from .forecast import (
    GmmForecast,
    SeasonProfile,
    expected_future_inflow,
    synthesize_forecast,
)
from .future import FutureModelConfig, build_future_model
from .models import CascadeSystem, HydroUnit, PiecewiseCurve, Reservoir
from .planner import (
    PlanMode,
    PlanningProblem,
    evaluate_target,
    slack_penalty,
    solve_plan,
)
from .rules import (
    RulesMeta,
    ValuationRules,
    check_exhaustive,
    evaluate_rules,
    locate_region,
)
from .settings import settings
from .utils import stable_hash

_logger = logging.getLogger(__name__)


class CaseKind(str, Enum):
    two_reservoir = "two_reservoir"  # large reservoir feeding a narrow one
    eight_reservoir = "eight_reservoir"  # chain of eight


class TruthProcess(BaseModel):
    """Realized weekly inflows: the profile's seasonal mean with lognormal noise.

    Every week draws from its own seeded generator, so the inflow of a week does
    not depend on which weeks were drawn before.
    """

    model_config = ConfigDict(frozen=True)

    profile: SeasonProfile
    seed: int = Field(default_factory=lambda: settings.seed)
    # Relative error of the forecast means against the truth.
    forecast_bias: float = 0.0

    def inflow(self, reservoir_id: str, week: int) -> float:
        mean = self.profile.weekly_mean(reservoir_id, week)
        sigma = self.profile.noise
        if sigma == 0:
            return mean
        key = int(stable_hash(reservoir_id), 16)
        rng = np.random.default_rng([self.seed, week, key])
        # unit-mean lognormal factor
        return float(mean * rng.lognormal(-(sigma**2) / 2, sigma))

    def inflows(
        self, system: CascadeSystem, start_week: int, weeks: int
    ) -> dict[str, list[float]]:
        return {
            rid: [self.inflow(rid, start_week + k) for k in range(weeks)]
            for rid in system.ids
        }

    def forecast(
        self, system: CascadeSystem, start_week: int, weeks: int, T: int
    ) -> GmmForecast:
        """Mixture forecast of weeks [start_week, start_week + weeks)."""
        biased = self.profile.model_copy(
            update={
                "base_inflow": {
                    k: v * (1 + self.forecast_bias)
                    for k, v in self.profile.base_inflow.items()
                }
            }
        )
        return synthesize_forecast(
            self.seed + start_week, system, T, weeks - T, biased, start_week
        )


class Case(BaseModel):
    system: CascadeSystem
    truth: TruthProcess


def _unit(rng: np.random.Generator, uid: str, d_max: float, k: float) -> HydroUnit:
    """A unit with a concave, monotone three-point curve."""
    d_max = round(d_max * rng.uniform(0.9, 1.1), 3)
    p_max = round(k * d_max, 3)
    curve = PiecewiseCurve(
        breakpoints=[(0.0, 0.0), (d_max / 2, round(0.55 * p_max, 3)), (d_max, p_max)]
    )
    return HydroUnit(
        id=uid, p_min=0.0, p_max=p_max, d_min=0.0, d_max=d_max, curve=curve
    )


def generate_case(kind: CaseKind | str, seed: int | None = None) -> Case:
    """A synthetic cascade with a seeded truth process.

    ``two_reservoir`` is a large upstream reservoir feeding one with a narrow
    storage band, three units each. ``eight_reservoir`` is a chain of eight
    reservoirs with one unit each.
    """
    seed = settings.seed if seed is None else seed
    try:
        kind = CaseKind(kind)
    except ValueError as e:
        raise UsageError(f"Unknown case kind {kind}.") from e
    rng = np.random.default_rng(seed)
    if kind == CaseKind.two_reservoir:
        reservoirs = [
            Reservoir(
                id="up",
                v_min=200.0,
                v_max=450.0,
                units=[_unit(rng, f"u{i}", 60.0, 2.0) for i in range(1, 4)],
            ),
            Reservoir(
                id="down",
                v_min=20.0,
                v_max=60.0,
                units=[_unit(rng, f"d{i}", 90.0, 0.6) for i in range(1, 4)],
                direct_upstream=["up"],
            ),
        ]
        base_inflow = {"up": 40.0, "down": 5.0}
    else:
        reservoirs = []
        base_inflow = {}
        for n in range(8):
            rid = f"r{n + 1}"
            # downstream reservoirs pass more water through smaller heads
            reservoirs.append(
                Reservoir(
                    id=rid,
                    v_min=10.0 * (n + 1),
                    v_max=10.0 * (n + 1) + 150.0,
                    units=[_unit(rng, "g1", 60.0 + 20.0 * n, 1.5 - 0.1 * n)],
                    direct_upstream=[f"r{n}"] if n else [],
                )
            )
            base_inflow[rid] = round(float(rng.uniform(5.0, 15.0)), 3)
    system = CascadeSystem(name=kind.value, reservoirs=reservoirs)
    profile = SeasonProfile.preset("transition", base_inflow)
    return Case(system=system, truth=TruthProcess(profile=profile, seed=seed))


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    # Simulated weeks; a multiple of T.
    horizon: int = 52
    T: int = Field(default_factory=lambda: settings.current_weeks, ge=1)
    L: int = Field(default_factory=lambda: settings.future_weeks, ge=1)
    omega: float = Field(default_factory=lambda: settings.omega, gt=0, lt=1)
    seed: int = Field(default_factory=lambda: settings.seed)
    mode: PlanMode = PlanMode.ccp
    # Storage at the beginning of the first cycle; the box center when None.
    initial_storage: list[float] | None = None
    epsilon: list[float] | None = None
    # Sampled points of the exhaustiveness check of every cycle's rules.
    coverage_points: int = 200

    @model_validator(mode="after")
    def validate_horizon(self) -> "SimConfig":
        if self.horizon < self.T or self.horizon % self.T:
            raise ValueError(f"horizon {self.horizon} is not a multiple of T={self.T}.")
        return self

    @property
    def cycles(self) -> int:
        return self.horizon // self.T


class WaterBalance(BaseModel):
    """Volumes of one reservoir over one cycle, Mm3."""

    inflow: float
    upstream: float  # released upstream and arriving here
    discharged: float
    spilled: float


class CycleReport(BaseModel):
    cycle: int
    start_week: int
    initial_storage: list[float]
    target: list[float]
    planned_benefit: float  # MWh
    future_value: float  # MWh, of the target
    realized_benefit: float  # MWh
    # Future value of the realized end storage, MWh.
    realized_future_value: float
    end_storage: list[float]
    slack: list[float]
    region_id: int
    regions: int
    partition_time: float  # seconds
    balance: dict[str, WaterBalance]


class SimReport(BaseModel):
    config: SimConfig
    config_hash: str
    system: str
    cycles: list[CycleReport] = []

    @property
    def planned_benefit(self) -> float:
        return sum(c.planned_benefit for c in self.cycles)

    @property
    def realized_benefit(self) -> float:
        return sum(c.realized_benefit for c in self.cycles)

    def write_json(self, path: Path) -> None:
        path.write_text(self.model_dump_json(indent=2))

    def write_csv(self, path: Path, ids: Sequence[str]) -> None:
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                [
                    "cycle",
                    "start_week",
                    *(f"target_{rid}" for rid in ids),
                    *(f"end_{rid}" for rid in ids),
                    "planned_mwh",
                    "realized_mwh",
                    "future_mwh",
                    "region_id",
                    "regions",
                    "seed",
                    "config_hash",
                ]
            )
            for c in self.cycles:
                writer.writerow(
                    [
                        c.cycle,
                        c.start_week,
                        *c.target,
                        *c.end_storage,
                        c.planned_benefit,
                        c.realized_benefit,
                        c.future_value,
                        c.region_id,
                        c.regions,
                        self.config.seed,
                        self.config_hash,
                    ]
                )


class SimListener(Protocol):
    def on_cycle(self, report: CycleReport) -> None: ...


class RollingSimulation:
    """Plan and replay the current period cycle after cycle.

    Tasks per cycle:
    - forecast the T + L weeks ahead;
    - value the carryover storage of the L future weeks;
    - plan the T current weeks against the valuation rules;
    - replay the planned target under the realized inflows;
    - carry the realized end storage over to the next cycle.
    """

    def __init__(
        self, system: CascadeSystem, config: SimConfig, truth: TruthProcess
    ) -> None:
        self.system = system
        self.config = config
        self.truth = truth
        self._listeners: WeakSet[SimListener] = WeakSet()

    def register_listener(self, listener: SimListener) -> None:
        self._listeners.add(listener)

    def _rules(self, forecast: GmmForecast, start_week: int) -> ValuationRules:
        config = self.config
        inflow = {
            rid: expected_future_inflow(forecast, rid, config.T, config.L)
            for rid in self.system.ids
        }
        future = build_future_model(
            self.system, inflow, FutureModelConfig(L=config.L, omega=config.omega)
        )
        rules = partition_then_extract(
            future.milp,
            self.system.v_min,
            self.system.v_max,
            reservoir_ids=self.system.ids,
            meta=RulesMeta(
                system=self.system.name,
                forecast_hash=stable_hash(forecast.model_dump(mode="json")),
                L=config.L,
                omega=config.omega,
                seed=config.seed,
            ),
        )
        coverage = check_exhaustive(rules, config.coverage_points, config.seed)
        if coverage.uncovered or coverage.overlapping:
            _logger.warning(
                f"Rules of week {start_week}: {coverage.uncovered} uncovered and "
                f"{coverage.overlapping} overlapping of {coverage.points} points."
            )
        return rules

    def _cycle(self, cycle: int, storage: list[float]) -> CycleReport:
        config = self.config
        system = self.system
        start = cycle * config.T
        forecast = self.truth.forecast(system, start, config.T + config.L, config.T)
        started = time.monotonic()
        rules = self._rules(forecast, start)
        partition_time = time.monotonic() - started
        realized = self.truth.inflows(system, start, config.T)
        problem = PlanningProblem(
            system=system,
            T=config.T,
            initial_storage=storage,
            rules=rules,
            mode=config.mode,
            forecast=forecast,
            inflows=realized if config.mode == PlanMode.det else None,
            epsilon=config.epsilon,
        )
        plan = solve_plan(problem)
        evaluation = evaluate_target(
            system,
            realized,
            plan.target,
            config.T,
            storage,
            slack_penalty(rules),
        )
        alpha, delay = system.alpha, system.delay
        balance = {}
        for r in system.reservoirs:
            entries = [e for e in evaluation.schedule if e.reservoir == r.id]
            upstream = sum(
                alpha * e.discharge + e.spill
                for e in evaluation.schedule
                if e.reservoir in r.direct_upstream and e.week + delay <= config.T
            )
            balance[r.id] = WaterBalance(
                inflow=sum(e.inflow for e in entries),
                upstream=upstream,
                discharged=sum(alpha * e.discharge for e in entries),
                spilled=sum(e.spill for e in entries),
            )
        return CycleReport(
            cycle=cycle,
            start_week=start,
            initial_storage=storage,
            target=plan.target,
            planned_benefit=plan.immediate_benefit,
            future_value=plan.future_value,
            realized_benefit=evaluation.immediate_benefit,
            realized_future_value=evaluate_rules(
                rules, np.array(evaluation.end_storage)
            ),
            end_storage=evaluation.end_storage,
            slack=evaluation.slack,
            region_id=plan.region_id,
            regions=len(rules.regions),
            partition_time=partition_time,
            balance=balance,
        )

    def run(self) -> SimReport:
        config = self.config
        report = SimReport(
            config=config,
            config_hash=stable_hash(config.model_dump(mode="json")),
            system=self.system.name,
        )
        storage = (
            list(config.initial_storage)
            if config.initial_storage is not None
            else self.system.box_center().tolist()
        )
        for cycle in range(config.cycles):
            try:
                result = self._cycle(cycle, storage)
            except Exception as e:
                raise SimulationError(cycle, e) from e
            report.cycles.append(result)
            _logger.info(
                f"Cycle {cycle}: target {[round(v, 3) for v in result.target]}, "
                f"realized {result.realized_benefit:.1f} MWh."
            )
            for listener in self._listeners:
                listener.on_cycle(result)
            storage = result.end_storage
        _logger.info(
            f"Simulated {config.horizon} weeks: {report.realized_benefit:.1f} MWh "
            f"realized, {report.planned_benefit:.1f} MWh planned."
        )
        return report


def run_rolling(
    system: CascadeSystem,
    config: SimConfig,
    truth: TruthProcess,
    listeners: Sequence[SimListener] = (),
) -> SimReport:
    simulation = RollingSimulation(system, config, truth)
    for listener in listeners:
        simulation.register_listener(listener)
    return simulation.run()


class SurfacePoint(BaseModel):
    theta: list[float]
    region_id: int
    value: float  # MWh


def sample_surface(
    rules: ValuationRules,
    axes: tuple[int, int],
    grid: int = 21,
    fixed: Sequence[float] | None = None,
) -> list[SurfacePoint]:
    """Future value over a grid of two reservoirs' storage, others held fixed.

    Reservoirs off the axes sit at ``fixed`` (the box center when None).
    """
    i, j = axes
    if i == j or not (0 <= i < rules.dim and 0 <= j < rules.dim):
        raise UsageError(f"Surface axes {axes} invalid for {rules.dim} reservoirs.")
    if grid < 2:
        raise UsageError("A surface grid needs at least two points per axis.")
    lo, hi = np.asarray(rules.v_min), np.asarray(rules.v_max)
    base = (lo + hi) / 2 if fixed is None else np.asarray(fixed, dtype=float)
    points = []
    for a in np.linspace(lo[i], hi[i], grid):
        for b in np.linspace(lo[j], hi[j], grid):
            theta = base.copy()
            theta[i], theta[j] = a, b
            region = locate_region(rules, theta)
            points.append(
                SurfacePoint(
                    theta=theta.tolist(),
                    region_id=region.id,
                    value=float(np.dot(region.pi, theta - lo)),
                )
            )
    return points


class LmwvStudy(BaseModel):
    # Mean marginal water value per reservoir, by profile name.
    mean_pi: dict[str, list[float]]
    reservoir_ids: list[str]
    # Broken expectations, as messages.
    findings: list[str] = []


def _is_chain(system: CascadeSystem) -> bool:
    return all(len(r.direct_upstream) <= 1 for r in system.reservoirs)


def seasonal_lmwv_study(
    system: CascadeSystem,
    profiles: Sequence[SeasonProfile],
    T: int | None = None,
    L: int | None = None,
    omega: float | None = None,
    seed: int | None = None,
) -> LmwvStudy:
    """Mean marginal water values per reservoir for every season profile.

    Expected: drier profiles value water at least as much as wetter ones, and
    values do not grow downstream along a chain.
    """
    T = T or settings.current_weeks
    L = L or settings.future_weeks
    config = FutureModelConfig(L=L, omega=omega or settings.omega)
    seed = settings.seed if seed is None else seed
    mean_pi: dict[str, list[float]] = {}
    for profile in profiles:
        forecast = synthesize_forecast(seed, system, T, L, profile)
        inflow = {
            rid: expected_future_inflow(forecast, rid, T, L) for rid in system.ids
        }
        future = build_future_model(system, inflow, config)
        rules = partition_then_extract(
            future.milp, system.v_min, system.v_max, reservoir_ids=system.ids
        )
        mean_pi[profile.name] = rules.mean_pi()
        _logger.info(f"{profile.name}: mean LMWV {np.round(mean_pi[profile.name], 3)}.")
    study = LmwvStudy(mean_pi=mean_pi, reservoir_ids=system.ids)
    tol = 1e-6
    if "wet" in mean_pi and "dry" in mean_pi:
        for rid, wet, dry in zip(
            system.ids, mean_pi["wet"], mean_pi["dry"], strict=True
        ):
            if dry < wet - tol * (1 + abs(wet)):
                study.findings.append(f"{rid}: dry mean {dry} below wet mean {wet}.")
    if _is_chain(system):
        for name, values in mean_pi.items():
            by_id = dict(zip(system.ids, values, strict=True))
            for r in system.reservoirs:
                for up in r.direct_upstream:
                    if by_id[r.id] > by_id[up] + tol * (1 + abs(by_id[up])):
                        study.findings.append(
                            f"{name}: {r.id} mean {by_id[r.id]} above upstream "
                            f"{up} mean {by_id[up]}."
                        )
    for finding in study.findings:
        _logger.warning(finding)
    return study

