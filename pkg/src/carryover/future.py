"""Future-period generation models with carryover storage as parameter.

The aggregated model splits the future period of every reservoir into a
non-discharge phase followed by a discharge phase of length ``L_dis``, encoded by a
binary expansion. Storage is checked whenever the reservoir itself or one of its
direct upstream reservoirs switches phase, and at the end of the period.
"""

import csv
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .builder import CurveVars, LinExpr, ModelBuilder, Var, lin_sum
from .exceptions import BigMError, UsageError
from .forecast import GmmForecast
from .models import CascadeSystem, Reservoir
from .settings import settings
from .solver import MilpSolution, ParametricMilp, Vector, solve_milp

_logger = logging.getLogger(__name__)


class FutureModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    # Future period length, weeks.
    L: int = Field(default_factory=lambda: settings.future_weeks, ge=1)
    # Resolution of the discharge phase length encoding.
    omega: float = Field(default_factory=lambda: settings.omega, gt=0, lt=1)
    # One big-M for every linearized product; None sizes each product tightly.
    big_m: float | None = None
    # Exploration threshold of the partition; None means a relative default.
    rho: float | None = None
    # Spill terms in the phase-switch storage checks.
    intermediate_spill: bool = Field(
        default_factory=lambda: settings.intermediate_spill
    )


@dataclass(frozen=True)
class ExpansionTerms:
    bits: int
    granularity: float  # weeks per unit of the least significant bit
    weights: tuple[float, ...]

    def value(self, bits: Sequence[float]) -> float:
        return float(np.dot(self.weights, bits))


def binary_expansion_terms(L: int, omega: float) -> ExpansionTerms:
    """Bits and weights encoding a discharge phase length in [0, L]."""
    if not 0 < omega < 1:
        raise UsageError(f"omega must lie in (0, 1), got {omega}.")
    bits = math.floor(math.log2(1 / (1 - omega)) + 1e-12) + 1
    granularity = L * (1 - omega)
    return ExpansionTerms(
        bits=bits,
        granularity=granularity,
        weights=tuple(granularity * 2**d for d in range(bits)),
    )


class _BigM:
    def __init__(self, uniform: float | None) -> None:
        self.uniform = uniform

    def __call__(self, bound: float, what: str) -> float:
        if self.uniform is None:
            return bound
        if self.uniform < bound:
            raise BigMError(
                f"big-M {self.uniform} is below the bound {bound} of {what}."
            )
        return self.uniform


class ReservoirOutcome(BaseModel):
    discharge_weeks: float  # L_dis
    idle_weeks: float  # L_n-dis
    spill: float  # Mm3
    storage_change: float  # end storage minus carryover storage, Mm3


class UnitOutcome(BaseModel):
    discharge: float  # m3/s, while discharging
    on: int
    power: float  # MW, while discharging


class FutureSolution(BaseModel):
    objective: float  # MWh
    reservoirs: dict[str, ReservoirOutcome]
    units: dict[str, UnitOutcome]


@dataclass
class FutureModel:
    """The aggregated model and the handles needed to read its solutions."""

    system: CascadeSystem
    inflow: dict[str, float]
    config: FutureModelConfig
    expansion: ExpansionTerms
    milp: ParametricMilp
    builder: ModelBuilder
    discharge_length: dict[str, LinExpr] = field(default_factory=dict)
    units: dict[str, CurveVars] = field(default_factory=dict)
    spill: dict[str, Var] = field(default_factory=dict)
    end_storage: dict[str, LinExpr] = field(default_factory=dict)

    def decode(self, solution: MilpSolution, theta: Vector) -> FutureSolution:
        return decode_future_solution(self, solution, theta)


def _unit_key(reservoir: Reservoir, unit_id: str) -> str:
    return f"{reservoir.id}/{unit_id}"


def _power_bound(reservoir: Reservoir) -> float:
    return sum(min(u.p_max, max(u.curve.powers)) for u in reservoir.units)


class _AggregatedBuilder:
    def __init__(
        self,
        system: CascadeSystem,
        inflow: Mapping[str, float],
        config: FutureModelConfig,
    ) -> None:
        self.system = system
        self.inflow = inflow
        self.config = config
        self.expansion = binary_expansion_terms(config.L, config.omega)
        self.mb = ModelBuilder(n_theta=len(system.reservoirs))
        self.big_m = _BigM(config.big_m)
        self.bits: dict[str, list[Var]] = {}
        self.length: dict[str, LinExpr] = {}
        self.flow: dict[str, LinExpr] = {}
        self.power: dict[str, LinExpr] = {}
        self.units: dict[str, CurveVars] = {}
        self.spill: dict[str, Var] = {}
        self._released: dict[tuple[str, str], LinExpr] = {}
        self._exchange: dict[tuple[str, str, str], LinExpr] = {}
        self._order: dict[tuple[str, str], Var] = {}

    def add_reservoir(self, r: Reservoir) -> None:
        mb = self.mb
        bits = [mb.add_binary(f"bit[{r.id},{d}]") for d in range(self.expansion.bits)]
        self.bits[r.id] = bits
        weights = self.expansion.weights
        length = lin_sum(w * b for w, b in zip(weights, bits, strict=True))
        mb.add_le(length, self.config.L, f"phase[{r.id}]")
        self.length[r.id] = length
        flow = LinExpr()
        power = LinExpr()
        for unit in r.units:
            key = _unit_key(r, unit.id)
            curve = unit.curve.restricted(unit.d_min, unit.d_max)
            cv = mb.add_piecewise_curve(curve, f"unit[{key}]", p_min=unit.p_min)
            mb.add_le(cv.power, unit.p_max * cv.on, f"unit[{key}]:p-max")
            self.units[key] = cv
            flow = flow + cv.discharge
            power = power + cv.power
        self.flow[r.id] = flow
        self.power[r.id] = power
        self.spill[r.id] = mb.add_continuous(f"spill[{r.id}]")

    def released(self, u: str, m: str) -> LinExpr:
        """L_dis of u times the discharge rate of m, in weeks * m3/s."""
        if (u, m) not in self._released:
            q_max = self.system.reservoir(m).max_discharge
            bound = self.big_m(q_max, f"flow[{u},{m}]")
            self._released[u, m] = lin_sum(
                w
                * self.mb.linearize_product(
                    b, self.flow[m], bound, f"flow[{u},{d},{m}]"
                )
                for d, (w, b) in enumerate(
                    zip(self.expansion.weights, self.bits[u], strict=True)
                )
            )
        return self._released[u, m]

    def energy(self, r: Reservoir) -> LinExpr:
        bound = self.big_m(_power_bound(r), f"power[{r.id}]")
        return lin_sum(
            w
            * self.mb.linearize_product(
                b, self.power[r.id], bound, f"energy[{r.id},{d}]"
            )
            for d, (w, b) in enumerate(
                zip(self.expansion.weights, self.bits[r.id], strict=True)
            )
        )

    def phase_order(self, v: str, u: str) -> Var:
        """Binary set when u discharges longer than v, with the exact phase gap."""
        if (v, u) not in self._order:
            mb = self.mb
            L = self.big_m(self.config.L, f"phase-gap[{v},{u}]")
            diff = self.length[u] - self.length[v]
            gap = mb.add_continuous(f"phase-gap[{v},{u}]")
            h = mb.add_binary(f"phase-order[{v},{u}]")
            mb.add_ge(gap, diff, f"phase-gap[{v},{u}]:epigraph")
            mb.add_le(gap, diff + L * (1 - h.expr()), f"phase-gap[{v},{u}]:active")
            mb.add_le(gap, L * h, f"phase-gap[{v},{u}]:inactive")
            self._order[v, u] = h
        return self._order[v, u]

    def exchange(self, v: str, u: str, m: str) -> LinExpr:
        """Phase gap of (v, u) times the discharge rate of m, weeks * m3/s."""
        if (v, u, m) not in self._exchange:
            h = self.phase_order(v, u)
            bound = self.config.L * self.system.reservoir(m).max_discharge
            bound = self.big_m(bound, f"exchange[{v},{u},{m}]")
            self._exchange[v, u, m] = self.mb.linearize_signed_product(
                h,
                self.released(u, m) - self.released(v, m),
                bound,
                f"exchange[{v},{u},{m}]",
            )
        return self._exchange[v, u, m]

    def storage_checks(self, n: int, r: Reservoir) -> None:
        mb = self.mb
        system = self.system
        alpha = system.alpha
        upstream = r.direct_upstream
        inflow = self.inflow[r.id]
        for v in [r.id, *upstream]:
            level = (
                mb.theta(n)
                + inflow
                - (inflow / self.config.L) * self.length[v]
            )
            for m in upstream:
                if m != v:
                    level = level + alpha * self.exchange(v, m, m)
            if v != r.id:
                level = level - alpha * self.exchange(v, r.id, r.id)
            if self.config.intermediate_spill:
                level = (
                    level
                    + lin_sum(self.spill[m] for m in upstream)
                    - self.spill[r.id]
                )
            mb.add_ge(level, r.v_min, f"storage-check-lower[{r.id}@{v}]")
            mb.add_le(level, r.v_max, f"storage-check-upper[{r.id}@{v}]")

    def end_storage(self, n: int, r: Reservoir) -> LinExpr:
        alpha = self.system.alpha
        level = (
            self.mb.theta(n)
            + self.inflow[r.id]
            + lin_sum(
                alpha * self.released(m, m) + self.spill[m] for m in r.direct_upstream
            )
            - alpha * self.released(r.id, r.id)
            - self.spill[r.id]
        )
        self.mb.add_ge(level, r.v_min, f"end-storage-lower[{r.id}]")
        self.mb.add_le(level, r.v_max, f"end-storage-upper[{r.id}]")
        return level


def build_future_model(
    system: CascadeSystem,
    inflow: Mapping[str, float],
    config: FutureModelConfig | None = None,
) -> FutureModel:
    """Aggregated future-period model, theta being the carryover storage."""
    config = config or FutureModelConfig()
    for rid in system.ids:
        if inflow.get(rid, -1.0) < 0:
            raise UsageError(f"Future inflow of {rid} missing or negative.")
    inflow = {rid: float(inflow[rid]) for rid in system.ids}
    ab = _AggregatedBuilder(system, inflow, config)
    for r in system.reservoirs:
        ab.add_reservoir(r)
    penalties = system.spill_penalties()
    end_storage = {}
    for n, r in enumerate(system.reservoirs):
        end_storage[r.id] = ab.end_storage(n, r)
        ab.storage_checks(n, r)
    ab.mb.maximize(
        lin_sum(system.lam * ab.energy(r) for r in system.reservoirs)
        - lin_sum(
            c * ab.spill[r.id]
            for c, r in zip(penalties, system.reservoirs, strict=True)
        )
    )
    milp = ab.mb.build()
    _logger.debug(
        f"Future model: {milp.n_rows} rows, {milp.n_x} continuous, "
        f"{milp.n_y} binaries."
    )
    return FutureModel(
        system=system,
        inflow=dict(inflow),
        config=config,
        expansion=ab.expansion,
        milp=milp,
        builder=ab.mb,
        discharge_length=ab.length,
        units=ab.units,
        spill=ab.spill,
        end_storage=end_storage,
    )


def build_future_milp(
    system: CascadeSystem,
    inflow: Mapping[str, float],
    config: FutureModelConfig | None = None,
) -> ParametricMilp:
    return build_future_model(system, inflow, config).milp


def decode_future_solution(
    model: FutureModel, solution: MilpSolution, theta: Vector
) -> FutureSolution:
    if not solution.is_optimal:
        raise UsageError(f"Cannot decode a {solution.status.value} solution.")
    assert solution.x is not None and solution.y is not None
    x, y = solution.x, solution.y
    reservoirs = {}
    for rid, length in model.discharge_length.items():
        dis = length.value(x, y)
        reservoirs[rid] = ReservoirOutcome(
            discharge_weeks=dis,
            idle_weeks=model.config.L - dis,
            spill=float(x[model.spill[rid].index]),
            storage_change=model.end_storage[rid].value(x, y, theta)
            - float(theta[model.system.index(rid)]),
        )
    units = {
        key: UnitOutcome(
            discharge=cv.discharge.value(x, y),
            on=round(cv.on.value(x, y)),
            power=cv.power.value(x, y),
        )
        for key, cv in model.units.items()
    }
    return FutureSolution(
        objective=solution.objective, reservoirs=reservoirs, units=units
    )


def build_full_model(
    system: CascadeSystem,
    weekly_inflow: Mapping[str, Sequence[float]],
    L: int,
) -> ParametricMilp:
    """Weekly future-period model without aggregation, same end-storage rows.

    Water released upstream reaches the direct downstream reservoir after
    ``system.delay`` weeks; releases arriving after the period are lost to it.
    """
    for rid in system.ids:
        if len(weekly_inflow.get(rid, ())) != L:
            raise UsageError(f"Weekly inflow of {rid} must cover {L} weeks.")
    mb = ModelBuilder(n_theta=len(system.reservoirs))
    alpha = system.alpha
    flow: dict[str, list[LinExpr]] = {rid: [] for rid in system.ids}
    power = LinExpr()
    spill: dict[str, list[Var]] = {rid: [] for rid in system.ids}
    for k in range(L):
        for r in system.reservoirs:
            q = LinExpr()
            for unit in r.units:
                key = f"{_unit_key(r, unit.id)},{k + 1}"
                curve = unit.curve.restricted(unit.d_min, unit.d_max)
                cv = mb.add_piecewise_curve(curve, f"unit[{key}]", p_min=unit.p_min)
                mb.add_le(cv.power, unit.p_max * cv.on, f"unit[{key}]:p-max")
                q = q + cv.discharge
                power = power + cv.power
            flow[r.id].append(q)
            spill[r.id].append(mb.add_continuous(f"spill[{r.id},{k + 1}]"))
    delay = system.delay
    for n, r in enumerate(system.reservoirs):
        level = mb.theta(n)
        for k in range(L):
            level = level + weekly_inflow[r.id][k]
            if k - delay >= 0:
                level = level + lin_sum(
                    alpha * flow[m][k - delay] + spill[m][k - delay]
                    for m in r.direct_upstream
                )
            level = level - alpha * flow[r.id][k] - spill[r.id][k]
            if k < L - 1:
                mb.add_ge(level, r.v_min, f"storage-lower[{r.id},{k + 1}]")
                mb.add_le(level, r.v_max, f"storage-upper[{r.id},{k + 1}]")
            else:
                mb.add_ge(level, r.v_min, f"end-storage-lower[{r.id}]")
                mb.add_le(level, r.v_max, f"end-storage-upper[{r.id}]")
    penalties = system.spill_penalties()
    mb.maximize(
        system.lam * power
        - lin_sum(
            c * s
            for c, r in zip(penalties, system.reservoirs, strict=True)
            for s in spill[r.id]
        )
    )
    return mb.build()


class GapSample(BaseModel):
    theta: list[float]
    obj_agg: float
    obj_full: float
    gap_pct: float | None  # None when the full objective is zero


class GapReport(BaseModel):
    samples: list[GapSample]

    @property
    def gaps(self) -> list[float]:
        return [s.gap_pct for s in self.samples if s.gap_pct is not None]

    @property
    def skipped(self) -> int:
        return sum(1 for s in self.samples if s.gap_pct is None)

    @property
    def gap_min(self) -> float:
        return min(self.gaps, default=0.0)

    @property
    def gap_mean(self) -> float:
        return float(np.mean(self.gaps)) if self.gaps else 0.0

    @property
    def gap_max(self) -> float:
        return max(self.gaps, default=0.0)

    def write_csv(self, path: Path, ids: Sequence[str]) -> None:
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                [*(f"theta_{rid}" for rid in ids), "obj_agg", "obj_full", "gap_pct"]
            )
            for s in self.samples:
                writer.writerow(
                    [
                        *s.theta,
                        s.obj_agg,
                        s.obj_full,
                        "" if s.gap_pct is None else s.gap_pct,
                    ]
                )


def aggregation_gap(
    system: CascadeSystem,
    forecast: GmmForecast,
    L: int,
    thetas: Sequence[Vector],
    config: FutureModelConfig | None = None,
    start_week: int = 0,
) -> GapReport:
    """Relative excess of the aggregated optimum over the weekly one, in percent.

    The forecast weeks used are [start_week, start_week + L).
    """
    config = (config or FutureModelConfig()).model_copy(update={"L": L})
    weekly = {
        rid: forecast.get(rid).mean()[start_week : start_week + L].tolist()
        for rid in system.ids
    }
    aggregated = build_future_milp(
        system, {rid: float(sum(w)) for rid, w in weekly.items()}, config
    )
    full = build_full_model(system, weekly, L)
    samples = []
    for theta in thetas:
        theta = np.asarray(theta, dtype=float)
        agg = solve_milp(aggregated, theta)
        ref = solve_milp(full, theta)
        if not (agg.is_optimal and ref.is_optimal):
            _logger.warning(f"Gap sample {theta.tolist()} skipped: not solvable.")
            continue
        gap = (
            None
            if abs(ref.objective) <= 1e-12
            else 100 * (agg.objective - ref.objective) / abs(ref.objective)
        )
        samples.append(
            GapSample(
                theta=theta.tolist(),
                obj_agg=agg.objective,
                obj_full=ref.objective,
                gap_pct=gap,
            )
        )
    report = GapReport(samples=samples)
    _logger.info(
        f"Aggregation gap over {len(samples)} samples: min {report.gap_min:.3f}%, "
        f"mean {report.gap_mean:.3f}%, max {report.gap_max:.3f}%."
    )
    return report
