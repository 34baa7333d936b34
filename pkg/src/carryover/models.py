import logging
import math
from collections.abc import Iterator
from pathlib import Path
from typing import ClassVar

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, ValidationError

from .exceptions import CurveDomainError, CycleError, InputError, SystemInvalid

_logger = logging.getLogger(__name__)

# Hours per week.
LAMBDA = 168.0
# Mm3 moved by a discharge of 1 m3/s sustained for one week.
ALPHA = 0.6048

# Storage values per reservoir, Mm3, in system order.
StorageVector = npt.NDArray[np.float64]


class PiecewiseCurve(BaseModel):
    """Discharge (m3/s) to power (MW) curve, applying only when the unit is ON."""

    model_config = ConfigDict(frozen=True)

    breakpoints: list[tuple[float, float]]

    @property
    def discharges(self) -> list[float]:
        return [d for d, _ in self.breakpoints]

    @property
    def powers(self) -> list[float]:
        return [p for _, p in self.breakpoints]

    def segments(self) -> Iterator[tuple[float, float, float, float]]:
        for (d0, p0), (d1, p1) in zip(
            self.breakpoints, self.breakpoints[1:], strict=False
        ):
            yield d0, p0, d1, p1

    def restricted(self, d_lo: float, d_hi: float) -> "PiecewiseCurve":
        """The same curve cut to [d_lo, d_hi]."""
        inner = [(d, p) for d, p in self.breakpoints if d_lo < d < d_hi]
        points = [(d_lo, curve_power(self, d_lo)), *inner]
        if d_hi > d_lo:
            points.append((d_hi, curve_power(self, d_hi)))
        return PiecewiseCurve(breakpoints=points)

    def best_energy_ratio(self) -> float:
        """Largest power per unit of discharge over the breakpoints, MW per m3/s."""
        ratios = [p / d for d, p in self.breakpoints if d > 0]
        return max(ratios, default=0.0)


class HydroUnit(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    p_min: float  # MW
    p_max: float  # MW
    d_min: float  # m3/s
    d_max: float  # m3/s
    curve: PiecewiseCurve


class Reservoir(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    v_min: float  # Mm3
    v_max: float  # Mm3
    # MWh per Mm3 spilled; None means the default derived from the units.
    spill_penalty: float | None = None
    units: list[HydroUnit] = []
    direct_upstream: list[str] = []

    @property
    def energy_value(self) -> float:
        """Largest MWh obtainable from one Mm3 through this reservoir's units."""
        ratio = max((u.curve.best_energy_ratio() for u in self.units), default=0.0)
        return LAMBDA * ratio / ALPHA

    @property
    def max_discharge(self) -> float:
        return sum(u.d_max for u in self.units)

    @property
    def max_power(self) -> float:
        return sum(max(u.curve.powers) for u in self.units)


class CascadeSystem(BaseModel):
    model_config = ConfigDict(frozen=True)

    lam: ClassVar[float] = LAMBDA
    alpha: ClassVar[float] = ALPHA

    name: str = ""
    reservoirs: list[Reservoir]
    # Travel time of released water to the direct downstream reservoir, weeks.
    delay: int = 0

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.reservoirs]

    def index(self, reservoir_id: str) -> int:
        return self.ids.index(reservoir_id)

    def reservoir(self, reservoir_id: str) -> Reservoir:
        return self.reservoirs[self.index(reservoir_id)]

    def upstream_indices(self, n: int) -> list[int]:
        return [self.index(m) for m in self.reservoirs[n].direct_upstream]

    @property
    def v_min(self) -> StorageVector:
        return np.array([r.v_min for r in self.reservoirs], dtype=float)

    @property
    def v_max(self) -> StorageVector:
        return np.array([r.v_max for r in self.reservoirs], dtype=float)

    def box_center(self) -> StorageVector:
        return (self.v_min + self.v_max) / 2

    def clip_to_box(self, storage: StorageVector) -> StorageVector:
        return np.clip(storage, self.v_min, self.v_max)

    def default_spill_penalty(self) -> float:
        """Ten times the best energy value of any unit in the system."""
        return 10 * max((r.energy_value for r in self.reservoirs), default=1.0)

    def spill_penalties(self) -> list[float]:
        default = self.default_spill_penalty()
        return [
            default if r.spill_penalty is None else r.spill_penalty
            for r in self.reservoirs
        ]


class Violation(BaseModel):
    entity: str  # reservoir, unit or system id
    rule: str  # short rule name, e.g. storage-bounds
    message: str

    def __str__(self) -> str:
        return f"{self.entity}: {self.rule}: {self.message}"


def _curve_violations(entity: str, unit: HydroUnit) -> Iterator[Violation]:
    points = unit.curve.breakpoints
    if len(points) < 2:
        yield Violation(
            entity=entity, rule="curve-breakpoints", message="fewer than 2 points"
        )
        return
    if not all(math.isfinite(d) and math.isfinite(p) for d, p in points):
        yield Violation(entity=entity, rule="curve-finite", message="non-finite point")
        return
    discharges = unit.curve.discharges
    if any(d1 <= d0 for d0, d1 in zip(discharges, discharges[1:], strict=False)):
        yield Violation(
            entity=entity,
            rule="curve-order",
            message="breakpoint discharges not strictly increasing",
        )
        return
    powers = unit.curve.powers
    if any(p1 < p0 for p0, p1 in zip(powers, powers[1:], strict=False)):
        yield Violation(
            entity=entity, rule="curve-monotone", message="power decreases"
        )
    if discharges[0] > unit.d_min or discharges[-1] < unit.d_max:
        yield Violation(
            entity=entity,
            rule="curve-domain",
            message=(
                f"curve covers [{discharges[0]}, {discharges[-1]}], "
                f"not [{unit.d_min}, {unit.d_max}]"
            ),
        )


def _unit_violations(reservoir: Reservoir, unit: HydroUnit) -> Iterator[Violation]:
    entity = f"{reservoir.id}/{unit.id}"
    if not 0 <= unit.p_min <= unit.p_max:
        yield Violation(
            entity=entity,
            rule="power-bounds",
            message=f"need 0 <= p_min <= p_max, got {unit.p_min}, {unit.p_max}",
        )
    if not 0 <= unit.d_min <= unit.d_max:
        yield Violation(
            entity=entity,
            rule="discharge-bounds",
            message=f"need 0 <= d_min <= d_max, got {unit.d_min}, {unit.d_max}",
        )
    yield from _curve_violations(entity, unit)


def _find_cycle(system: CascadeSystem) -> list[str] | None:
    known = set(system.ids)
    graph = {
        r.id: [m for m in r.direct_upstream if m in known] for r in system.reservoirs
    }
    state: dict[str, int] = {}  # 1 visiting, 2 done

    def visit(node: str, path: list[str]) -> list[str] | None:
        state[node] = 1
        for upstream in graph[node]:
            if state.get(upstream) == 1:
                return [*path[path.index(upstream) :], upstream]
            if upstream not in state:
                found = visit(upstream, [*path, upstream])
                if found:
                    return found
        state[node] = 2
        return None

    for rid in system.ids:
        if rid not in state:
            found = visit(rid, [rid])
            if found:
                return found
    return None


def validate_system(system: CascadeSystem) -> list[Violation]:
    """Check every invariant of the system; violations are returned, not raised."""
    violations: list[Violation] = []
    seen: set[str] = set()
    for reservoir in system.reservoirs:
        if reservoir.id in seen:
            violations.append(
                Violation(entity=reservoir.id, rule="unique-id", message="duplicate")
            )
        seen.add(reservoir.id)
        if not 0 <= reservoir.v_min < reservoir.v_max:
            violations.append(
                Violation(
                    entity=reservoir.id,
                    rule="storage-bounds",
                    message=(
                        f"need 0 <= v_min < v_max, "
                        f"got {reservoir.v_min}, {reservoir.v_max}"
                    ),
                )
            )
        if reservoir.spill_penalty is not None and reservoir.spill_penalty < 0:
            violations.append(
                Violation(
                    entity=reservoir.id,
                    rule="spill-penalty",
                    message="spill penalty must be nonnegative",
                )
            )
        for upstream in reservoir.direct_upstream:
            if upstream not in system.ids:
                violations.append(
                    Violation(
                        entity=reservoir.id,
                        rule="topology",
                        message=f"unknown upstream reservoir {upstream}",
                    )
                )
        for unit in reservoir.units:
            violations.extend(_unit_violations(reservoir, unit))
    if system.delay < 0:
        violations.append(
            Violation(entity="system", rule="delay", message="delay must be >= 0")
        )
    cycle = _find_cycle(system)
    if cycle:
        violations.append(
            Violation(
                entity="system",
                rule="topology",
                message=f"upstream cycle {' -> '.join(cycle)}",
            )
        )
    return violations


def curve_power(curve: PiecewiseCurve, d: float) -> float:
    """Power of a discharge by linear interpolation between breakpoints."""
    discharges = curve.discharges
    if not discharges[0] <= d <= discharges[-1]:
        raise CurveDomainError(
            f"Discharge {d} outside curve domain [{discharges[0]}, {discharges[-1]}]."
        )
    return float(np.interp(d, discharges, curve.powers))


def topological_order(system: CascadeSystem) -> list[str]:
    """Reservoir ids, each after all of its direct upstream reservoirs."""
    remaining = {r.id: set(r.direct_upstream) for r in system.reservoirs}
    order: list[str] = []
    while remaining:
        ready = [rid for rid in system.ids if rid in remaining and not remaining[rid]]
        if not ready:
            raise CycleError(f"Upstream cycle among {sorted(remaining)}.")
        for rid in ready:
            order.append(rid)
            del remaining[rid]
        for upstreams in remaining.values():
            upstreams.difference_update(ready)
    return order


def load_system(path: Path) -> CascadeSystem:
    try:
        system = CascadeSystem.model_validate_json(path.read_text())
    except OSError as e:
        raise InputError(f"Cannot read system file {path}: {e}") from e
    except ValidationError as e:
        raise InputError(f"Invalid system file {path}: {e}") from e
    violations = validate_system(system)
    if violations:
        raise SystemInvalid([str(v) for v in violations])
    _logger.debug(f"Loaded system {system.name or path.name}.")
    return system


def dump_system(system: CascadeSystem, path: Path) -> None:
    path.write_text(system.model_dump_json(indent=2))
