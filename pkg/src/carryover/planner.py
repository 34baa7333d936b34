"""Current-period planning with a carryover storage target.

The planning MILP schedules the T weeks of the current period and values the
storage left at its end with the valuation rules. Storage bounds hold with a
prescribed probability (chance mode) or for point inflows (deterministic mode).
"""

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .builder import CurveVars, LinExpr, ModelBuilder, Var, lin_sum
from .exceptions import DomainViolation, InfeasibleProblem, NumericError, UsageError
from .forecast import GmmForecast, gmm_quantile, project_affine, sample_inflows
from .models import CascadeSystem
from .rules import (
    RulesBlock,
    ValuationRules,
    emit_milp_constraints,
    evaluate_rules,
    locate_region,
)
from .settings import settings
from .solver import MilpSolution, ParametricMilp, SolveStatus, solve_milp
from .utils import parallel_map

_logger = logging.getLogger(__name__)

# Joint violation probability of the storage box in weeks 1..4.
DEFAULT_EPSILON = (0.010, 0.015, 0.020, 0.025)
MAX_EPSILON = 0.05
# Objective weight of one Mm3 of elastic slack when looking for binding rows.
ELASTIC_PENALTY = 1e6


class PlanMode(str, Enum):
    ccp = "ccp"  # storage box as chance constraints on the forecast mixture
    det = "det"  # storage box for point inflows


def default_epsilon(T: int) -> list[float]:
    """0.010, 0.015, 0.020, 0.025, then growing by 0.005 per week up to 0.05."""
    return [min(0.010 + 0.005 * t, MAX_EPSILON) for t in range(T)]


class PlanningProblem(BaseModel):
    model_config = ConfigDict(frozen=True)

    system: CascadeSystem
    # Current period length, weeks.
    T: int = Field(default_factory=lambda: settings.current_weeks, ge=1)
    # Storage at the beginning of week 1, Mm3, in system order.
    initial_storage: list[float]
    rules: ValuationRules
    mode: PlanMode = PlanMode.ccp
    # Forecast whose first T weeks are the current period.
    forecast: GmmForecast | None = None
    # Point inflows of the deterministic mode, Mm3/week; forecast means if None.
    inflows: dict[str, list[float]] | None = None
    # Joint violation probability per week; the defaults when None.
    epsilon: list[float] | None = None

    @model_validator(mode="after")
    def validate_problem(self) -> "PlanningProblem":
        n = len(self.system.reservoirs)
        if len(self.initial_storage) != n:
            raise ValueError(f"initial_storage needs {n} values.")
        if self.rules.dim != n:
            raise ValueError(f"Rules cover {self.rules.dim} reservoirs, not {n}.")
        if self.epsilon is not None:
            if len(self.epsilon) < self.T:
                raise ValueError(f"epsilon needs {self.T} values.")
            if not all(0 < e < 1 for e in self.epsilon):
                raise ValueError("epsilon values must lie in (0, 1).")
        if self.mode == PlanMode.ccp and self.forecast is None:
            raise ValueError("The chance mode needs a forecast.")
        if self.inflows is None and self.forecast is None:
            raise ValueError("Either inflows or a forecast is required.")
        if self.forecast is not None and self.forecast.weeks < self.T:
            raise ValueError(f"The forecast covers fewer than {self.T} weeks.")
        if self.inflows is not None:
            for rid in self.system.ids:
                weekly = self.inflows.get(rid, [])
                if len(weekly) < self.T:
                    raise ValueError(f"Inflows of {rid} cover under {self.T} weeks.")
                if min(weekly[: self.T]) < 0:
                    raise ValueError(f"Inflows of {rid} must be nonnegative.")
        return self

    @property
    def epsilons(self) -> list[float]:
        return (self.epsilon or default_epsilon(self.T))[: self.T]

    def point_inflows(self) -> dict[str, list[float]]:
        """Weekly inflows the expected storage recursion uses."""
        if self.mode == PlanMode.det and self.inflows is not None:
            return {rid: self.inflows[rid][: self.T] for rid in self.system.ids}
        assert self.forecast is not None
        return {
            rid: self.forecast.get(rid).mean()[: self.T].tolist()
            for rid in self.system.ids
        }


class ChanceRow(BaseModel):
    """Quantiles bounding the cumulative inflow of weeks 1..week."""

    reservoir: str
    week: int
    level: float  # probability allowed on each side
    lower: float  # Mm3, quantile at level
    upper: float  # Mm3, quantile at 1 - level


def jcc_to_rows(problem: PlanningProblem) -> list[ChanceRow]:
    """Split every weekly joint chance constraint into two rows per reservoir.

    Each side of each reservoir gets epsilon / 2N, so the joint constraint holds by
    the union bound.
    """
    if problem.mode != PlanMode.ccp:
        raise UsageError("Chance rows exist only in the chance mode.")
    assert problem.forecast is not None
    n = len(problem.system.reservoirs)
    rows = []
    for t, eps in enumerate(problem.epsilons, start=1):
        level = eps / (2 * n)
        for rid in problem.system.ids:
            s = np.zeros(problem.forecast.get(rid).weeks)
            s[:t] = 1.0
            cumulative = project_affine(problem.forecast, rid, s)
            rows.append(
                ChanceRow(
                    reservoir=rid,
                    week=t,
                    level=level,
                    lower=gmm_quantile(cumulative, level),
                    upper=gmm_quantile(cumulative, 1 - level),
                )
            )
    return rows


class _CurrentPeriod:
    """Weekly units and spill of the current period, with storage expressions.

    ``managed[rid][t]`` is the storage at the end of week t+1 without any inflow of
    the reservoir itself; adding the cumulative inflow gives the storage.
    """

    def __init__(
        self,
        mb: ModelBuilder,
        system: CascadeSystem,
        T: int,
        initial_storage: Sequence[float],
    ) -> None:
        self.system = system
        self.T = T
        self.flow: dict[str, list[LinExpr]] = {rid: [] for rid in system.ids}
        self.power: dict[str, list[LinExpr]] = {rid: [] for rid in system.ids}
        self.spill: dict[str, list[Var]] = {rid: [] for rid in system.ids}
        self.units: dict[tuple[str, int], CurveVars] = {}
        for t in range(1, T + 1):
            for r in system.reservoirs:
                flow, power = LinExpr(), LinExpr()
                for unit in r.units:
                    name = f"unit[{r.id}/{unit.id},{t}]"
                    curve = unit.curve.restricted(unit.d_min, unit.d_max)
                    cv = mb.add_piecewise_curve(curve, name, p_min=unit.p_min)
                    mb.add_le(cv.power, unit.p_max * cv.on, f"{name}:p-max")
                    self.units[f"{r.id}/{unit.id}", t] = cv
                    flow = flow + cv.discharge
                    power = power + cv.power
                self.flow[r.id].append(flow)
                self.power[r.id].append(power)
                self.spill[r.id].append(mb.add_continuous(f"spill[{r.id},{t}]"))
        alpha, delay = system.alpha, system.delay
        self.managed: dict[str, list[LinExpr]] = {}
        for n, r in enumerate(system.reservoirs):
            level = LinExpr(constant=initial_storage[n])
            levels = []
            for k in range(T):
                if k - delay >= 0:
                    level = level + lin_sum(
                        alpha * self.flow[m][k - delay] + self.spill[m][k - delay]
                        for m in r.direct_upstream
                    )
                level = level - alpha * self.flow[r.id][k] - self.spill[r.id][k]
                levels.append(level)
            self.managed[r.id] = levels

    def storage(
        self, inflows: Mapping[str, Sequence[float]]
    ) -> dict[str, list[LinExpr]]:
        """End-of-week storage under the given weekly inflows."""
        return {
            rid: [
                level + float(np.sum(inflows[rid][: k + 1]))
                for k, level in enumerate(levels)
            ]
            for rid, levels in self.managed.items()
        }

    def energy(self) -> LinExpr:
        """Immediate benefit, MWh."""
        return self.system.lam * lin_sum(
            p for powers in self.power.values() for p in powers
        )

    def schedule(
        self,
        solution: MilpSolution,
        inflows: Mapping[str, Sequence[float]],
    ) -> list["ScheduleEntry"]:
        assert solution.x is not None and solution.y is not None
        x, y = solution.x, solution.y
        storage = self.storage(inflows)
        entries = []
        for t in range(1, self.T + 1):
            for r in self.system.reservoirs:
                entries.append(
                    ScheduleEntry(
                        week=t,
                        reservoir=r.id,
                        discharge=self.flow[r.id][t - 1].value(x, y),
                        spill=float(x[self.spill[r.id][t - 1].index]),
                        power=self.power[r.id][t - 1].value(x, y),
                        inflow=float(inflows[r.id][t - 1]),
                        storage=storage[r.id][t - 1].value(x, y),
                        units={
                            unit.id: self.units[f"{r.id}/{unit.id}", t].power.value(
                                x, y
                            )
                            for unit in r.units
                        },
                    )
                )
        return entries


class ScheduleEntry(BaseModel):
    week: int
    reservoir: str
    discharge: float  # m3/s
    spill: float  # Mm3
    power: float  # MW
    inflow: float  # Mm3, as planned
    storage: float  # Mm3 at the end of the week
    units: dict[str, float] = {}  # MW


class PlanResult(BaseModel):
    mode: PlanMode
    target: list[float]  # carryover storage, Mm3
    immediate_benefit: float  # MWh
    future_value: float  # MWh
    region_id: int
    schedule: list[ScheduleEntry]

    def entries(self, reservoir: str) -> list[ScheduleEntry]:
        return [e for e in self.schedule if e.reservoir == reservoir]


@dataclass
class PlanModel:
    milp: ParametricMilp
    period: _CurrentPeriod
    inflows: dict[str, list[float]]
    target: list[LinExpr]
    energy: LinExpr
    rules: RulesBlock | None = None
    elastic: dict[str, Var] = field(default_factory=dict)


def _storage_rows(
    mb: ModelBuilder,
    problem: PlanningProblem,
    period: _CurrentPeriod,
    elastic: bool,
) -> dict[str, Var]:
    """Storage box rows of every week; with ``elastic`` each row gets a slack."""
    slacks: dict[str, Var] = {}

    def relax(tag: str) -> LinExpr:
        if not elastic:
            return LinExpr()
        slacks[tag] = mb.add_continuous(f"elastic[{tag}]")
        return slacks[tag].expr()

    system = problem.system
    if problem.mode == PlanMode.det:
        storage = period.storage(problem.point_inflows())
        for r in system.reservoirs:
            for t, level in enumerate(storage[r.id], start=1):
                tag = f"storage-lower[{r.id},{t}]"
                mb.add_ge(level + relax(tag), r.v_min, tag)
                tag = f"storage-upper[{r.id},{t}]"
                mb.add_le(level - relax(tag), r.v_max, tag)
        return slacks
    for row in jcc_to_rows(problem):
        r = system.reservoir(row.reservoir)
        level = period.managed[r.id][row.week - 1]
        tag = f"chance-lower[{r.id},{row.week}]"
        mb.add_ge(level + row.lower + relax(tag), r.v_min, tag)
        tag = f"chance-upper[{r.id},{row.week}]"
        mb.add_le(level + row.upper - relax(tag), r.v_max, tag)
    return slacks


def build_plan_model(problem: PlanningProblem, elastic: bool = False) -> PlanModel:
    """The planning MILP and the expressions needed to read its solution.

    With ``elastic`` the storage rows are relaxed and the objective only minimizes
    the relaxation, which names the rows that make the problem infeasible.
    """
    mb = ModelBuilder()
    period = _CurrentPeriod(mb, problem.system, problem.T, problem.initial_storage)
    inflows = problem.point_inflows()
    target = [period.storage(inflows)[rid][-1] for rid in problem.system.ids]
    slacks = _storage_rows(mb, problem, period, elastic)
    energy = period.energy()
    block = None
    if elastic:
        mb.maximize(-ELASTIC_PENALTY * lin_sum(slacks.values()))
    else:
        block = emit_milp_constraints(problem.rules, mb, target)
        mb.maximize(energy + block.value)
    return PlanModel(
        milp=mb.build(),
        period=period,
        inflows=inflows,
        target=target,
        energy=energy,
        rules=block,
        elastic=slacks,
    )


def build_plan_milp(problem: PlanningProblem) -> ParametricMilp:
    return build_plan_model(problem).milp


def _binding_tags(problem: PlanningProblem) -> list[str]:
    model = build_plan_model(problem, elastic=True)
    solution = solve_milp(model.milp, np.zeros(0))
    if not solution.is_optimal:
        return []
    assert solution.x is not None
    return [
        tag
        for tag, slack in model.elastic.items()
        if solution.x[slack.index] > settings.tolerances.feasibility
    ]


def _rules_value(
    rules: ValuationRules, selected: int, target: list[float], embedded: float
) -> float:
    """The rules value of the target, checked against the embedded one.

    On a boundary shared by several regions the embedded model may select any of
    them; the reported value is the one of the region the rules assign.
    """
    storage = np.array(target)
    chosen = next(r for r in rules.regions if r.id == selected)
    piece = float(np.dot(chosen.pi, storage - np.asarray(rules.v_min)))
    tol = 1e-6 * (1.0 + abs(embedded))
    if not chosen.contains(storage, tol=1e-6) or abs(piece - embedded) > tol:
        raise NumericError(
            f"Embedded future value {embedded} of region {selected} does not "
            f"match the rules at {target}."
        )
    value = evaluate_rules(rules, storage)
    if abs(value - embedded) > tol:
        _logger.info(
            f"Target {target} lies on a region boundary; the rules value {value} "
            f"replaces the embedded value {embedded}."
        )
    return value


def solve_plan(problem: PlanningProblem) -> PlanResult:
    """Optimal schedule and carryover storage target of the current period."""
    model = build_plan_model(problem)
    solution = solve_milp(model.milp, np.zeros(0))
    if solution.status == SolveStatus.unbounded:
        raise DomainViolation("The planning model is unbounded.")
    if not solution.is_optimal:
        raise InfeasibleProblem(
            f"The {problem.mode.value} planning model is infeasible",
            _binding_tags(problem),
        )
    assert solution.x is not None and solution.y is not None
    assert model.rules is not None
    x, y = solution.x, solution.y
    target = [expr.value(x, y) for expr in model.target]
    future_value = model.rules.value.value(x, y)
    selected = [
        region.id
        for region, z in zip(problem.rules.regions, model.rules.indicators, strict=True)
        if y[z.index] > 0.5
    ]
    future_value = _rules_value(problem.rules, selected[0], target, future_value)
    region = locate_region(problem.rules, np.array(target))
    result = PlanResult(
        mode=problem.mode,
        target=target,
        immediate_benefit=model.energy.value(x, y),
        future_value=future_value,
        region_id=region.id,
        schedule=model.period.schedule(solution, model.inflows),
    )
    _logger.info(
        f"Planned target {[round(v, 3) for v in target]} Mm3: immediate "
        f"{result.immediate_benefit:.1f} MWh, future {future_value:.1f} MWh "
        f"(region {result.region_id})."
    )
    return result


def slack_penalty(rules: ValuationRules) -> float:
    """MWh per Mm3 of deviation from the target: ten times the largest value."""
    largest = max((abs(v) for r in rules.regions for v in r.pi), default=0.0)
    return 10 * largest if largest > 0 else 1.0


@dataclass
class ShortTermModel:
    milp: ParametricMilp
    period: _CurrentPeriod
    inflows: dict[str, list[float]]
    energy: LinExpr
    end_storage: list[LinExpr]
    # Storage above and below the target, Mm3.
    surplus: list[Var]
    deficit: list[Var]


def build_short_term_eval(
    system: CascadeSystem,
    inflows: Mapping[str, Sequence[float]],
    target: Sequence[float],
    T: int,
    initial_storage: Sequence[float],
    penalty: float = 1.0,
) -> ShortTermModel:
    """Weekly schedule reaching the target under realized inflows.

    The end storage equals the target up to a slack in each direction, penalized at
    ``penalty`` MWh per Mm3.
    """
    for rid in system.ids:
        weekly = inflows.get(rid, ())
        if len(weekly) < T or min(weekly[:T]) < 0:
            raise UsageError(f"Inflows of {rid} must be {T} nonnegative values.")
    mb = ModelBuilder()
    period = _CurrentPeriod(mb, system, T, initial_storage)
    weekly = {rid: [float(w) for w in inflows[rid][:T]] for rid in system.ids}
    storage = period.storage(weekly)
    for r in system.reservoirs:
        for t, level in enumerate(storage[r.id], start=1):
            mb.add_ge(level, r.v_min, f"storage-lower[{r.id},{t}]")
            mb.add_le(level, r.v_max, f"storage-upper[{r.id},{t}]")
    surplus, deficit = [], []
    for n, r in enumerate(system.reservoirs):
        width = r.v_max - r.v_min
        up = mb.add_continuous(f"target-surplus[{r.id}]", upper=width)
        down = mb.add_continuous(f"target-deficit[{r.id}]", upper=width)
        mb.add_eq(storage[r.id][-1] - up + down, target[n], f"target[{r.id}]")
        surplus.append(up)
        deficit.append(down)
    energy = period.energy()
    mb.maximize(energy - penalty * lin_sum([*surplus, *deficit]))
    return ShortTermModel(
        milp=mb.build(),
        period=period,
        inflows=weekly,
        energy=energy,
        end_storage=[storage[rid][-1] for rid in system.ids],
        surplus=surplus,
        deficit=deficit,
    )


class EvaluationResult(BaseModel):
    immediate_benefit: float  # MWh
    end_storage: list[float]  # Mm3
    slack: list[float]  # end storage minus target, Mm3
    schedule: list[ScheduleEntry]


def evaluate_target(
    system: CascadeSystem,
    inflows: Mapping[str, Sequence[float]],
    target: Sequence[float],
    T: int,
    initial_storage: Sequence[float],
    penalty: float = 1.0,
) -> EvaluationResult:
    model = build_short_term_eval(system, inflows, target, T, initial_storage, penalty)
    solution = solve_milp(model.milp, np.zeros(0))
    if not solution.is_optimal:
        raise InfeasibleProblem(
            f"The short-term evaluation is {solution.status.value}."
        )
    assert solution.x is not None and solution.y is not None
    x, y = solution.x, solution.y
    slack = [
        float(x[up.index] - x[down.index])
        for up, down in zip(model.surplus, model.deficit, strict=True)
    ]
    if any(abs(s) > settings.tolerances.feasibility for s in slack):
        _logger.warning(f"Target {list(target)} missed by {slack} Mm3.")
    return EvaluationResult(
        immediate_benefit=model.energy.value(x, y),
        end_storage=[expr.value(x, y) for expr in model.end_storage],
        slack=slack,
        schedule=model.period.schedule(solution, model.inflows),
    )


def monte_carlo_violation_rates(
    problem: PlanningProblem,
    result: PlanResult,
    draws: int = 100_000,
    seed: int | None = None,
) -> list[float]:
    """Per week, the share of forecast draws leaving the storage box anywhere.

    The schedule's releases are kept and only the inflows are resampled.
    """
    if problem.forecast is None:
        raise UsageError("Violation rates need a forecast.")
    system = problem.system
    forecast = problem.forecast
    seeds = np.random.SeedSequence(settings.seed if seed is None else seed).spawn(
        len(system.reservoirs)
    )

    def violations(item: tuple[str, np.random.SeedSequence]) -> npt.NDArray[np.bool_]:
        rid, seq = item
        r = system.reservoir(rid)
        entries = result.entries(rid)
        planned = np.cumsum([e.inflow for e in entries])
        managed = np.array([e.storage for e in entries]) - planned
        samples = sample_inflows(forecast, rid, draws, np.random.default_rng(seq))
        storage = managed + np.cumsum(samples[:, : problem.T], axis=1)
        tol = settings.tolerances.feasibility
        return (storage < r.v_min - tol) | (storage > r.v_max + tol)

    per_reservoir = parallel_map(violations, list(zip(system.ids, seeds, strict=True)))
    joint = np.logical_or.reduce(per_reservoir)
    rates = joint.mean(axis=0)
    _logger.info(f"Violation rates per week: {np.round(rates, 5).tolist()}.")
    return [float(v) for v in rates]


def write_plan_json(result: PlanResult, path: Path) -> None:
    path.write_text(result.model_dump_json(indent=2))


def write_schedule_csv(schedule: Sequence[ScheduleEntry], path: Path) -> None:
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["week", "reservoir", "discharge", "spill", "power", "inflow", "storage"]
        )
        for e in schedule:
            writer.writerow(
                [
                    e.week,
                    e.reservoir,
                    e.discharge,
                    e.spill,
                    e.power,
                    e.inflow,
                    e.storage,
                ]
            )
