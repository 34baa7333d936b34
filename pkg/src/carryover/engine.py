"""Partition-then-extract valuation of the carryover storage box.

The future model is first solved parametrically in the carryover storage theta:
the box is split into critical regions, each with one optimal binary vector and an
affine value piece. Marginal water values are read off each region afterwards.
"""

import logging
import time
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .exceptions import DomainViolation, InfeasibleProblem, ResourceLimitError
from .polytope import (
    Polytope,
    bounding_box,
    chebyshev_center,
    normalize,
    remove_redundant,
)
from .rules import AffinePiece, CriticalRegion, Inequality, RulesMeta, ValuationRules
from .settings import settings
from .solver import (
    Cuts,
    LpSolution,
    ParametricMilp,
    SolveStatus,
    Vector,
    solve_lp,
    solve_milp,
)
from .utils import parallel_map

_logger = logging.getLogger(__name__)

# Rows of a critical region closer than this to a parent row are the parent's.
ROW_MATCH_TOLERANCE = 1e-9
# Relative half-radius step used to leave a flat critical region.
PERTURBATION = 0.5

BinaryVector = tuple[int, ...]


@dataclass(frozen=True, eq=False)
class ValuePiece:
    """J(theta) = a'theta + g."""

    a: Vector
    g: float

    def __call__(self, theta: Vector) -> float:
        return float(self.a @ np.asarray(theta, dtype=float) + self.g)

    def same_as(self, other: "ValuePiece", tol: float = 1e-7) -> bool:
        return bool(
            np.allclose(self.a, other.a, rtol=tol, atol=tol)
            and abs(self.g - other.g) <= tol * (1.0 + abs(self.g))
        )


@dataclass(frozen=True, eq=False)
class MplpRegion:
    polytope: Polytope
    # None where the fixed binaries admit no feasible point.
    piece: ValuePiece | None
    duals: Vector | None
    basis: tuple[int, ...]
    center: Vector
    radius: float

    @property
    def feasible(self) -> bool:
        return self.piece is not None


def _as_binary(y: Vector | Iterable[float]) -> BinaryVector:
    return tuple(int(round(float(v))) for v in y)


def _phase_one(model: ParametricMilp) -> ParametricMilp:
    """max -t s.t. A x - t <= b - E y + F theta; optimal value 0 iff feasible."""
    return replace(
        model,
        c=np.concatenate([np.zeros(model.n_x), [-1.0]]),
        A=np.hstack([model.A, -np.ones((model.n_rows, 1))]),
        x_names=(),
    )


def _basis_rows(model: ParametricMilp, y: Vector, basis: tuple[int, ...]) -> Polytope:
    """Rows keeping the basis primal feasible: -B^-1 (b - E y + F theta) <= 0."""
    columns = np.hstack([model.A, np.eye(model.n_rows)])
    lu = lu_factor(columns[:, list(basis)])
    return Polytope(-lu_solve(lu, model.F), -lu_solve(lu, model.b - model.E @ y))


def _significant(rows: Polytope, lower: Vector, upper: Vector) -> Polytope:
    """Drop constant rows and rows that hold everywhere in the box."""
    norms = np.linalg.norm(rows.E, axis=1)
    safe = np.where(norms > 1e-12, norms, 1.0)
    largest = np.sum(np.maximum(rows.E * lower, rows.E * upper), axis=1) + rows.f
    keep = (norms > 1e-12) & (largest / safe > ROW_MATCH_TOLERANCE)
    return Polytope(rows.E[keep], rows.f[keep])


def _own_rows(region: Polytope, parent: Polytope) -> Polytope:
    """Rows of the region that do not come from the parent."""
    if not len(parent):
        return region
    reference = normalize(parent)
    keep = []
    for i, (e, f) in enumerate(zip(region.E, region.f, strict=True)):
        close = (
            np.abs(reference.E - e).max(axis=1) <= ROW_MATCH_TOLERANCE
        ) & (np.abs(reference.f - f) <= ROW_MATCH_TOLERANCE)
        if not close.any():
            keep.append(i)
    return Polytope(region.E[keep], region.f[keep])


def _value_piece(model: ParametricMilp, y: Vector, lp: LpSolution) -> ValuePiece:
    assert lp.duals is not None
    return ValuePiece(
        a=model.F.T @ lp.duals,
        g=float(lp.duals @ (model.b - model.E @ y) + model.d @ y),
    )


def _region_at(
    model: ParametricMilp,
    y: Vector,
    part: Polytope,
    box: tuple[Vector, Vector],
    theta: Vector,
) -> MplpRegion | None:
    """The critical region of the optimal basis at theta, None when it is flat."""
    lp = solve_lp(model, theta, y)
    if lp.status == SolveStatus.unbounded:
        raise DomainViolation(f"Model is unbounded at theta={theta.tolist()}.")
    piece = None
    if lp.is_optimal:
        rows = _basis_rows(model, y, lp.basis)
        piece = _value_piece(model, y, lp)
    else:
        phase_one = _phase_one(model)
        lp = solve_lp(phase_one, theta, y)
        rows = _basis_rows(phase_one, y, lp.basis)
    region = remove_redundant(part.intersect(_significant(rows, *box)))
    ball = chebyshev_center(region)
    if ball.center is None or ball.radius <= settings.tolerances.region:
        return None
    return MplpRegion(
        polytope=region,
        piece=piece,
        duals=lp.duals if piece is not None else None,
        basis=lp.basis,
        center=ball.center,
        radius=ball.radius,
    )


def _critical_region(
    model: ParametricMilp,
    y: Vector,
    part: Polytope,
    box: tuple[Vector, Vector],
    center: Vector,
    radius: float,
) -> MplpRegion:
    candidates = [center]
    for k in range(len(center)):
        for sign in (1.0, -1.0):
            shifted = center.copy()
            shifted[k] += sign * PERTURBATION * radius
            candidates.append(shifted)
    for theta in candidates:
        if (found := _region_at(model, y, part, box, theta)) is not None:
            return found
    _logger.warning(
        f"Critical region at {center.tolist()} stays flat after perturbation, "
        "using the whole subregion."
    )
    lp = solve_lp(model, center, y)
    return MplpRegion(
        polytope=part,
        piece=_value_piece(model, y, lp) if lp.is_optimal else None,
        duals=lp.duals,
        basis=lp.basis,
        center=center,
        radius=radius,
    )


def solve_mplp(
    model: ParametricMilp, fixed_y: Vector, space: Polytope
) -> list[MplpRegion]:
    """Partition the space into critical regions of the LP with fixed binaries.

    Each found region is removed from its subregion by reversing its own
    inequalities one at a time; the resulting pieces are explored in turn. Regions
    where the binaries are infeasible come back with ``piece=None``.
    """
    y = np.asarray(fixed_y, dtype=float)
    box = bounding_box(space)
    tol = settings.tolerances.region
    regions: list[MplpRegion] = []
    queue = deque([space])
    while queue:
        part = queue.popleft()
        ball = chebyshev_center(part)
        if ball.center is None or ball.radius <= tol:
            continue
        if len(regions) >= settings.max_regions:
            raise ResourceLimitError(
                f"mp-LP exceeded {settings.max_regions} critical regions."
            )
        region = _critical_region(model, y, part, box, ball.center, ball.radius)
        regions.append(region)
        own = _own_rows(region.polytope, part)
        for i in range(len(own)):
            sub = part
            for k in range(i):
                sub = sub.with_row(own.E[k], own.f[k])
            queue.append(sub.intersect(own.reversed_row(i)))
    if regions and not any(r.feasible for r in regions):
        _logger.debug(f"Binaries {_as_binary(y)} are infeasible over the space.")
    return regions


def explore_binaries(
    model: ParametricMilp,
    region: Polytope,
    iplb: ValuePiece | None,
    explored: Iterable[BinaryVector],
    rho: float | None = None,
    offset: Vector | None = None,
) -> BinaryVector | None:
    """Binaries improving on the lower bound somewhere in the region, if any.

    Solves the model with theta as a variable restricted to the region, excluding
    every explored binary vector by an integer cut and, when a lower bound is
    known, requiring the objective to beat it by ``rho``.
    """
    if offset is None:
        offset = bounding_box(region)[0]
    lifted = model.lift_theta(offset)
    p, n, q = model.n_x, model.n_theta, model.n_y
    # region rows on t = theta - offset
    cuts = Cuts(
        A=np.hstack([np.zeros((len(region), p)), region.E]),
        E=np.zeros((len(region), q)),
        b=-region.f - region.E @ offset,
        tags=tuple(f"explore:region[{i}]" for i in range(len(region))),
    )
    c = np.concatenate([model.c, np.zeros(n)])
    if iplb is not None:
        if rho is None:
            center = chebyshev_center(region).center
            reference = iplb(center) if center is not None else 0.0
            rho = 1e-6 * (1.0 + abs(reference))
        c = np.concatenate([model.c, -iplb.a])
        cuts = cuts + Cuts(
            A=np.concatenate([-model.c, iplb.a])[None, :],
            E=-model.d[None, :],
            b=np.array([-iplb.g - rho - float(iplb.a @ offset)]),
            tags=("explore:improvement",),
        )
    for k, y_hat in enumerate(explored):
        ones = np.asarray(y_hat, dtype=float)
        cuts = cuts + Cuts(
            A=np.zeros((1, p + n)),
            E=np.where(ones > 0.5, 1.0, -1.0)[None, :],
            b=np.array([ones.sum() - 1.0]),
            tags=(f"explore:integer-cut[{k}]",),
        )
    solution = solve_milp(replace(lifted, c=c), np.zeros(0), cuts)
    if not solution.is_optimal:
        return None
    assert solution.y is not None
    return _as_binary(solution.y)


@dataclass(frozen=True, eq=False)
class Lmwv:
    """Marginal water values at a point of a critical region."""

    pi: Vector
    # Multipliers of the end-storage-lower rows, when the model tags them.
    raw: Vector | None
    degenerate: bool


def extract_lmwv(
    model: ParametricMilp,
    fixed_y: Vector,
    theta: Vector,
    reservoir_ids: Sequence[str] = (),
) -> Lmwv:
    """pi = F' phi from the optimal multipliers at theta.

    Inside a critical region pi equals the slope of the value piece and does not
    depend on which optimal multipliers the solver returns.
    """
    lp = solve_lp(model, theta, fixed_y)
    if not lp.is_optimal:
        raise InfeasibleProblem(
            f"Cannot extract marginal values at {np.asarray(theta).tolist()}: "
            f"the LP is {lp.status.value}."
        )
    assert lp.duals is not None
    pi = model.F.T @ lp.duals
    raw = None
    tags = [f"end-storage-lower[{rid}]" for rid in reservoir_ids]
    if tags and all(tag in model.row_tags for tag in tags):
        raw = np.array([lp.duals[model.row_index(tag)] for tag in tags])
        if lp.degenerate and not np.allclose(raw, pi, rtol=1e-6, atol=1e-6):
            _logger.warning(
                f"Degenerate multipliers at {np.asarray(theta).tolist()}: "
                f"end-storage duals {raw.tolist()} differ from pi {pi.tolist()}."
            )
    elif lp.degenerate:
        _logger.debug(f"Degenerate LP at {np.asarray(theta).tolist()}.")
    return Lmwv(pi=pi, raw=raw, degenerate=lp.degenerate)


@dataclass(eq=False)
class _Task:
    region: Polytope
    iplb: ValuePiece | None
    incumbent: BinaryVector | None
    explored: frozenset[BinaryVector]


@dataclass
class PartitionStats:
    explorations: int = 0
    partitions: int = 0
    dropped_regions: int = 0
    merged_regions: int = 0
    wall_time: float = 0.0  # seconds


def _row_keys(polytope: Polytope) -> dict[tuple[float, ...], int]:
    rows = normalize(polytope)
    return {
        tuple(np.round(np.append(e, f), 7).tolist()): i
        for i, (e, f) in enumerate(zip(rows.E, rows.f, strict=True))
    }


def _merge_pair(first: Polytope, second: Polytope) -> Polytope | None:
    """The union when both regions differ by exactly one reversed row."""
    keys_1, keys_2 = _row_keys(first), _row_keys(second)
    only_1 = set(keys_1) - set(keys_2)
    only_2 = set(keys_2) - set(keys_1)
    if len(only_1) != 1 or len(only_2) != 1:
        return None
    (row_1,), (row_2,) = only_1, only_2
    if tuple(-v for v in row_1) != row_2:
        return None
    common = [k for k in keys_1 if k != row_1]
    if not common:
        return None
    rows = np.array(common)
    return remove_redundant(Polytope(rows[:, :-1], rows[:, -1]))


class PartitionEngine:
    """Split the carryover storage box into critical regions of the future model.

    Tasks:
    - partition the box with the mp-LP of an initial binary vector;
    - look for improving binaries in every region, partitioning it again for each
      improvement until no region improves;
    - merge neighbouring regions with the same binaries and value piece;
    - extract the marginal water values at every region center in parallel.
    """

    def __init__(
        self,
        model: ParametricMilp,
        lower: Vector,
        upper: Vector,
        *,
        reservoir_ids: Sequence[str] = (),
        rho: float | None = None,
        compare_incumbents: bool | None = None,
        merge_regions: bool | None = None,
        max_regions: int | None = None,
    ) -> None:
        self.model = model
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != (model.n_theta,) or self.upper.shape != (model.n_theta,):
            raise DomainViolation(
                f"Storage box has dimension {self.lower.shape}, "
                f"model has {model.n_theta} parameters."
            )
        if (self.upper < self.lower).any():
            raise DomainViolation("Storage box has upper below lower bounds.")
        self.reservoir_ids = list(reservoir_ids)
        self.rho = rho
        self.compare_incumbents = (
            settings.compare_incumbents
            if compare_incumbents is None
            else compare_incumbents
        )
        self.merge_regions = (
            settings.merge_regions if merge_regions is None else merge_regions
        )
        self.max_regions = max_regions or settings.max_regions
        self.stats = PartitionStats()

    @property
    def box(self) -> Polytope:
        return Polytope.box(self.lower, self.upper)

    def initial_binaries(self) -> BinaryVector:
        """Optimal binaries at the box center, else any feasible binaries."""
        center = (self.lower + self.upper) / 2
        solution = solve_milp(self.model, center)
        if solution.is_optimal:
            assert solution.y is not None
            return _as_binary(solution.y)
        _logger.info("Model is infeasible at the box center, searching the box.")
        y = explore_binaries(self.model, self.box, None, (), offset=self.lower)
        if y is None:
            raise InfeasibleProblem("Model is infeasible over the whole storage box.")
        return y

    def _partition(self, y: BinaryVector, space: Polytope) -> list[MplpRegion]:
        self.stats.partitions += 1
        return solve_mplp(self.model, np.array(y, dtype=float), space)

    def _split(
        self, region: MplpRegion, task: _Task, y: BinaryVector
    ) -> list[_Task]:
        """Children of a task after partitioning it with new binaries."""
        explored = task.explored | {y}
        if region.piece is None:
            return [_Task(region.polytope, task.iplb, task.incumbent, explored)]
        if not self.compare_incumbents or task.iplb is None:
            return [_Task(region.polytope, region.piece, y, explored)]
        # keep the new binaries only where they beat the incumbent
        da = region.piece.a - task.iplb.a
        dg = region.piece.g - task.iplb.g
        if np.linalg.norm(da) <= 1e-12:
            if dg > 0:
                return [_Task(region.polytope, region.piece, y, explored)]
            return [_Task(region.polytope, task.iplb, task.incumbent, explored)]
        children = []
        for sign, piece, binaries in (
            (1.0, region.piece, y),
            (-1.0, task.iplb, task.incumbent),
        ):
            part = region.polytope.with_row(-sign * da, -sign * dg)
            ball = chebyshev_center(part)
            if ball.center is not None and ball.radius > settings.tolerances.region:
                children.append(
                    _Task(remove_redundant(part), piece, binaries, explored)
                )
        return children

    def _explore(self) -> list[_Task]:
        y_init = self.initial_binaries()
        _logger.info(f"Initial binaries {y_init}.")
        queue: deque[_Task] = deque()
        for region in self._partition(y_init, self.box):
            incumbent = y_init if region.feasible else None
            queue.append(
                _Task(region.polytope, region.piece, incumbent, frozenset({y_init}))
            )
        final: list[_Task] = []
        while queue:
            if len(queue) + len(final) > self.max_regions:
                raise ResourceLimitError(
                    f"Partition exceeded {self.max_regions} regions."
                )
            task = queue.popleft()
            self.stats.explorations += 1
            y = explore_binaries(
                self.model,
                task.region,
                task.iplb,
                task.explored,
                rho=self.rho,
                offset=self.lower,
            )
            if y is None:
                final.append(task)
                continue
            _logger.debug(f"Binaries {y} improve on {task.incumbent}.")
            for region in self._partition(y, task.region):
                queue.extend(self._split(region, task, y))
        return final

    def _mergeable(self, tasks: list[_Task]) -> tuple[int, int, Polytope] | None:
        for i, first in enumerate(tasks):
            for j in range(i + 1, len(tasks)):
                second = tasks[j]
                if first.incumbent != second.incumbent:
                    continue
                assert first.iplb is not None and second.iplb is not None
                if not first.iplb.same_as(second.iplb):
                    continue
                if (union := _merge_pair(first.region, second.region)) is not None:
                    return i, j, union
        return None

    def _merge(self, tasks: list[_Task]) -> list[_Task]:
        while (found := self._mergeable(tasks)) is not None:
            i, j, union = found
            tasks[i] = replace(tasks[i], region=union)
            del tasks[j]
            self.stats.merged_regions += 1
        return tasks

    def _critical_region(self, index: int, task: _Task) -> CriticalRegion:
        assert task.incumbent is not None and task.iplb is not None
        ball = chebyshev_center(task.region)
        assert ball.center is not None
        lmwv = extract_lmwv(
            self.model,
            np.array(task.incumbent, dtype=float),
            ball.center,
            self.reservoir_ids,
        )
        if not np.allclose(lmwv.pi, task.iplb.a, rtol=1e-6, atol=1e-6):
            _logger.warning(
                f"Region {index}: pi {lmwv.pi.tolist()} differs from the value "
                f"slope {task.iplb.a.tolist()}."
            )
        return CriticalRegion(
            id=index,
            ineqs=[
                Inequality(e=e.tolist(), f=float(f))
                for e, f in zip(task.region.E, task.region.f, strict=True)
            ],
            y_star=list(task.incumbent),
            pi=lmwv.pi.tolist(),
            value=AffinePiece(a=task.iplb.a.tolist(), g=task.iplb.g),
            raw_duals=None if lmwv.raw is None else lmwv.raw.tolist(),
            center=ball.center.tolist(),
            radius=ball.radius,
            degenerate=lmwv.degenerate,
        )

    def run(self, meta: RulesMeta | None = None) -> ValuationRules:
        started = time.monotonic()
        final = self._explore()
        kept = [t for t in final if t.iplb is not None]
        self.stats.dropped_regions = len(final) - len(kept)
        if self.stats.dropped_regions:
            _logger.warning(
                f"Dropped {self.stats.dropped_regions} regions without feasible "
                "binaries."
            )
        if not kept:
            raise InfeasibleProblem("No feasible binaries anywhere in the box.")
        if self.merge_regions:
            kept = self._merge(kept)
        regions = parallel_map(
            lambda item: self._critical_region(*item), list(enumerate(kept))
        )
        self.stats.wall_time = time.monotonic() - started
        _logger.info(
            f"Partitioned the storage box into {len(regions)} regions "
            f"({self.stats.explorations} explorations, "
            f"{self.stats.partitions} mp-LPs) in {self.stats.wall_time:.1f}s."
        )
        meta = (meta or RulesMeta()).model_copy(
            update={
                "reservoir_ids": self.reservoir_ids,
                "explorations": self.stats.explorations,
                "lp_solves": self.stats.partitions,
                "dropped_regions": self.stats.dropped_regions,
                "wall_time": self.stats.wall_time,
            }
        )
        return ValuationRules(
            regions=regions,
            v_min=self.lower.tolist(),
            v_max=self.upper.tolist(),
            meta=meta,
        )


def partition_then_extract(
    model: ParametricMilp,
    lower: Vector,
    upper: Vector,
    *,
    reservoir_ids: Sequence[str] = (),
    meta: RulesMeta | None = None,
    rho: float | None = None,
    compare_incumbents: bool | None = None,
    merge_regions: bool | None = None,
) -> ValuationRules:
    """Valuation rules of the model over the storage box [lower, upper]."""
    engine = PartitionEngine(
        model,
        lower,
        upper,
        reservoir_ids=reservoir_ids,
        rho=rho,
        compare_incumbents=compare_incumbents,
        merge_regions=merge_regions,
    )
    return engine.run(meta)
