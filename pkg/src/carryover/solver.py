import heapq
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import numpy.typing as npt
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import linprog

from .exceptions import NumericError, ResourceLimitError, UsageError
from .settings import settings

_logger = logging.getLogger(__name__)

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]

# Steepest-edge pricing is used for this many iterations, then Bland's rule.
STEEPEST_EDGE_ITERATIONS = 500
# Pivots between two refactorizations of the basis inverse.
REFACTOR_INTERVAL = 50
# Pivot elements below this magnitude are never used.
PIVOT_TOLERANCE = 1e-9
# Reduced costs below this (relative to the largest cost) count as zero.
OPTIMALITY_TOLERANCE = 1e-9
# Largest number of binaries accepted by the enumeration oracle.
BRUTE_FORCE_LIMIT = 20


class SolveStatus(str, Enum):
    optimal = "optimal"
    infeasible = "infeasible"  # no point satisfies the rows
    unbounded = "unbounded"  # the objective grows without limit


@dataclass(frozen=True, eq=False)
class Cuts:
    """Rows A x + E y <= b added to a model for one solve, without theta terms."""

    A: Matrix
    E: Matrix
    b: Vector
    tags: tuple[str, ...]

    @classmethod
    def empty(cls, n_x: int, n_y: int) -> "Cuts":
        return cls(np.zeros((0, n_x)), np.zeros((0, n_y)), np.zeros(0), ())

    def __len__(self) -> int:
        return len(self.b)

    def __add__(self, other: "Cuts") -> "Cuts":
        return Cuts(
            np.vstack([self.A, other.A]),
            np.vstack([self.E, other.E]),
            np.concatenate([self.b, other.b]),
            self.tags + other.tags,
        )


@dataclass(frozen=True, eq=False)
class ParametricMilp:
    """max c'x + d'y s.t. Ax + Ey <= b + F theta, x >= 0, y binary.

    Every row carries a tag naming the constraint it comes from, so multipliers can
    be looked up by name (e.g. ``end-storage-lower[up]``).
    """

    c: Vector
    d: Vector
    A: Matrix
    E: Matrix
    b: Vector
    F: Matrix
    row_tags: tuple[str, ...]
    x_names: tuple[str, ...] = ()
    y_names: tuple[str, ...] = ()
    _row_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        m = len(self.b)
        if self.A.shape != (m, len(self.c)):
            raise UsageError(f"A has shape {self.A.shape}, expected {(m, self.n_x)}.")
        if self.E.shape != (m, len(self.d)):
            raise UsageError(f"E has shape {self.E.shape}, expected {(m, self.n_y)}.")
        if self.F.ndim != 2 or self.F.shape[0] != m:
            raise UsageError(f"F has shape {self.F.shape}, expected {m} rows.")
        if len(self.row_tags) != m:
            raise UsageError("Every row needs a tag.")
        object.__setattr__(
            self, "_row_index", {tag: i for i, tag in enumerate(self.row_tags)}
        )

    @property
    def n_rows(self) -> int:
        return len(self.b)

    @property
    def n_x(self) -> int:
        return len(self.c)

    @property
    def n_y(self) -> int:
        return len(self.d)

    @property
    def n_theta(self) -> int:
        return int(self.F.shape[1])

    def row_index(self, tag: str) -> int:
        return self._row_index[tag]

    def rhs(self, theta: Vector, y: Vector | None = None) -> Vector:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise UsageError(
                f"theta has shape {theta.shape}, expected ({self.n_theta},)."
            )
        r = self.b + self.F @ theta
        if y is not None:
            r = r - self.E @ y
        return r

    def with_rows(self, cuts: Cuts) -> "ParametricMilp":
        """A copy of the model with θ-free rows appended."""
        return ParametricMilp(
            c=self.c,
            d=self.d,
            A=np.vstack([self.A, cuts.A]),
            E=np.vstack([self.E, cuts.E]),
            b=np.concatenate([self.b, cuts.b]),
            F=np.vstack([self.F, np.zeros((len(cuts), self.n_theta))]),
            row_tags=self.row_tags + cuts.tags,
            x_names=self.x_names,
            y_names=self.y_names,
        )

    def lift_theta(self, offset: Vector | None = None) -> "ParametricMilp":
        """The same model with theta moved into the continuous variables.

        The lifted model has no parameters; its continuous variables are
        ``[x, theta - offset]``, so theta is restricted to theta >= offset.
        """
        b = self.b if offset is None else self.b + self.F @ offset
        theta_names = tuple(f"theta[{k}]" for k in range(self.n_theta))
        return ParametricMilp(
            c=np.concatenate([self.c, np.zeros(self.n_theta)]),
            d=self.d,
            A=np.hstack([self.A, -self.F]),
            E=self.E,
            b=b,
            F=np.zeros((self.n_rows, 0)),
            row_tags=self.row_tags,
            x_names=(self.x_names or tuple(f"x[{j}]" for j in range(self.n_x)))
            + theta_names,
            y_names=self.y_names,
        )


@dataclass(frozen=True, eq=False)
class LpSolution:
    status: SolveStatus
    x: Vector | None = None
    objective: float = float("-inf")
    # One multiplier per model row; >= 0 for the <= rows of a max problem.
    duals: Vector | None = None
    # Sorted basic column indices over [x, slacks].
    basis: tuple[int, ...] = ()
    y: Vector | None = None
    iterations: int = 0
    # Some basic variable sits at zero, so duals may not be unique.
    degenerate: bool = False

    @property
    def is_optimal(self) -> bool:
        return self.status == SolveStatus.optimal


@dataclass(frozen=True, eq=False)
class MilpSolution:
    status: SolveStatus
    x: Vector | None = None
    y: Vector | None = None
    objective: float = float("-inf")
    nodes: int = 0

    @property
    def is_optimal(self) -> bool:
        return self.status == SolveStatus.optimal


@dataclass
class _StandardResult:
    status: SolveStatus
    x: Vector | None = None
    duals: Vector | None = None
    basis: tuple[int, ...] = ()
    iterations: int = 0
    degenerate: bool = False


def _invert(B: Matrix) -> Matrix:
    return np.asarray(lu_solve(lu_factor(B), np.eye(len(B))))


def _pivot_inverse(inverse: Matrix, alpha: Vector, leave: int) -> None:
    """Update the basis inverse in place after column ``alpha`` enters at ``leave``."""
    pivot_row = inverse[leave] / alpha[leave]
    inverse -= np.outer(alpha, pivot_row)
    inverse[leave] = pivot_row


def _lexicographic_leave(
    ties: npt.NDArray[np.intp], alpha: Vector, inverse: Matrix
) -> int:
    m = len(alpha)
    rows = inverse[ties, :].T  # columns are rows of B^-1
    remaining = list(range(len(ties)))
    for j in range(m):
        values = rows[j, remaining] / alpha[ties[remaining]]
        low = values.min()
        remaining = [
            k for k, v in zip(remaining, values, strict=True) if v <= low + 1e-12
        ]
        if len(remaining) == 1:
            break
    return int(ties[remaining[0]])


def _iterate(
    M: Matrix,
    h: Vector,
    cost: Vector,
    basis: list[int],
    allowed: npt.NDArray[np.bool_],
) -> tuple[SolveStatus, int]:
    m, n_cols = M.shape
    opt_tol = OPTIMALITY_TOLERANCE * max(1.0, float(np.abs(cost).max(initial=0.0)))
    max_iterations = 50 * (m + n_cols) + 1000
    inverse = _invert(M[:, basis])
    for iteration in range(max_iterations):
        if iteration and iteration % REFACTOR_INTERVAL == 0:
            inverse = _invert(M[:, basis])
        z_b = inverse @ h
        y = cost[basis] @ inverse
        reduced = cost - y @ M
        reduced[basis] = 0.0
        reduced[~allowed] = 0.0
        candidates = np.flatnonzero(reduced > opt_tol)
        if not len(candidates):
            return SolveStatus.optimal, iteration
        bland = iteration >= STEEPEST_EDGE_ITERATIONS
        if bland:
            entering = int(candidates[0])
            alpha = inverse @ M[:, entering]
        else:
            alphas = inverse @ M[:, candidates]
            weights = np.sqrt(1.0 + np.sum(alphas**2, axis=0))
            best = int(np.argmax(reduced[candidates] / weights))
            entering = int(candidates[best])
            alpha = alphas[:, best]
        positive = alpha > PIVOT_TOLERANCE
        if not positive.any():
            return SolveStatus.unbounded, iteration
        ratios = np.full(m, np.inf)
        ratios[positive] = np.maximum(z_b[positive], 0.0) / alpha[positive]
        low = ratios.min()
        ties = np.flatnonzero(ratios <= low + 1e-12 * (1.0 + abs(low)))
        if len(ties) == 1:
            leave = int(ties[0])
        elif bland:
            leave = int(ties[np.argmin(np.asarray(basis)[ties])])
        else:
            leave = _lexicographic_leave(ties, alpha, inverse)
        basis[leave] = entering
        _pivot_inverse(inverse, alpha, leave)
    raise NumericError(f"Simplex did not converge in {max_iterations} iterations.")


def _drive_out_artificials(M: Matrix, basis: list[int], first_artificial: int) -> None:
    m = M.shape[0]
    for k in range(m):
        if basis[k] < first_artificial:
            continue
        lu = lu_factor(M[:, basis])
        row = lu_solve(lu, np.eye(m)[:, k], trans=1)
        entries = np.abs(row @ M[:, :first_artificial])
        entries[[j for j in basis if j < first_artificial]] = 0.0
        basis[k] = int(np.argmax(entries))


def _solve_standard(c: Vector, A: Matrix, r: Vector) -> _StandardResult:
    """max c'x s.t. A x <= r, x >= 0 by two-phase revised simplex."""
    m, n = A.shape
    if m == 0:
        if (c > OPTIMALITY_TOLERANCE).any():
            return _StandardResult(SolveStatus.unbounded)
        return _StandardResult(SolveStatus.optimal, np.zeros(n), np.zeros(0))
    scale = np.abs(A).max(axis=1)
    scale[scale < 1e-12] = 1.0
    a_s = A / scale[:, None]
    r_s = r / scale
    sign = np.where(r_s < 0, -1.0, 1.0)
    artificial_rows = np.flatnonzero(sign < 0)
    n_art = len(artificial_rows)
    M = np.zeros((m, n + m + n_art))
    M[:, :n] = sign[:, None] * a_s
    M[:, n : n + m] = np.diag(sign)
    M[artificial_rows, n + m + np.arange(n_art)] = 1.0
    h = sign * r_s
    basis = [n + i for i in range(m)]
    for k, i in enumerate(artificial_rows):
        basis[i] = n + m + k
    iterations = 0
    if n_art:
        cost = np.zeros(n + m + n_art)
        cost[n + m :] = -1.0
        _, iterations = _iterate(M, h, cost, basis, np.ones(len(cost), dtype=bool))
        z_b = lu_solve(lu_factor(M[:, basis]), h)
        infeasibility = -float(cost[basis] @ z_b)
        if infeasibility > settings.tolerances.feasibility * (1.0 + np.abs(h).max()):
            return _StandardResult(SolveStatus.infeasible, iterations=iterations)
        _drive_out_artificials(M, basis, n + m)
    cost = np.zeros(n + m + n_art)
    cost[:n] = c
    allowed = np.zeros(n + m + n_art, dtype=bool)
    allowed[: n + m] = True
    status, phase_two = _iterate(M, h, cost, basis, allowed)
    iterations += phase_two
    if status == SolveStatus.unbounded:
        return _StandardResult(status, iterations=iterations)
    lu = lu_factor(M[:, basis])
    z_b = lu_solve(lu, h)
    y = lu_solve(lu, cost[basis], trans=1)
    z = np.zeros(n + m + n_art)
    z[basis] = np.maximum(z_b, 0.0)
    return _StandardResult(
        status=SolveStatus.optimal,
        x=z[:n],
        duals=sign * y / scale,
        basis=tuple(sorted(basis)),
        iterations=iterations,
        degenerate=bool((np.abs(z_b) < settings.tolerances.feasibility).any()),
    )


def _check_y(model: ParametricMilp, y: Vector | None) -> Vector:
    if y is None:
        if model.n_y:
            raise UsageError(f"Model has {model.n_y} binaries, fixed_y is required.")
        return np.zeros(0)
    y = np.asarray(y, dtype=float)
    if y.shape != (model.n_y,):
        raise UsageError(f"fixed_y has shape {y.shape}, expected ({model.n_y},).")
    return y


def _solve_fixed(
    model: ParametricMilp, theta: Vector, y: Vector, cuts: Cuts | None = None
) -> LpSolution:
    A = model.A
    r = model.rhs(theta, y)
    if cuts is not None and len(cuts):
        A = np.vstack([A, cuts.A])
        r = np.concatenate([r, cuts.b - cuts.E @ y])
    result = _solve_standard(model.c, A, r)
    if result.status != SolveStatus.optimal:
        return LpSolution(status=result.status, y=y, iterations=result.iterations)
    assert result.x is not None and result.duals is not None
    return LpSolution(
        status=SolveStatus.optimal,
        x=result.x,
        objective=float(model.c @ result.x + model.d @ y),
        duals=result.duals[: model.n_rows],
        basis=result.basis,
        y=y,
        iterations=result.iterations,
        degenerate=result.degenerate,
    )


def solve_lp(
    model: ParametricMilp, theta: Vector, fixed_y: Vector | None = None
) -> LpSolution:
    """Solve the model at theta with all binaries fixed; duals are per model row."""
    return _solve_fixed(model, theta, _check_y(model, fixed_y))


@dataclass(order=True)
class _Node:
    priority: float
    order: int
    fixed: tuple[tuple[int, int], ...] = field(compare=False)


@dataclass(frozen=True, eq=False)
class _Relaxation:
    """LP relaxation data of one MILP solve, shared by all its nodes."""

    c: Vector
    A: Matrix
    b: Vector
    n_x: int

    @classmethod
    def of(cls, model: ParametricMilp, r: Vector, cuts: Cuts) -> "_Relaxation":
        return cls(
            c=-np.concatenate([model.c, model.d]),
            A=np.vstack(
                [np.hstack([model.A, model.E]), np.hstack([cuts.A, cuts.E])]
            ),
            b=np.concatenate([r, cuts.b]),
            n_x=model.n_x,
        )

    def solve(
        self, fixed: tuple[tuple[int, int], ...]
    ) -> tuple[SolveStatus, float, Vector]:
        q = len(self.c) - self.n_x
        lower, upper = np.zeros(q), np.ones(q)
        for j, v in fixed:
            lower[j] = upper[j] = v
        result = linprog(
            self.c,
            A_ub=self.A if len(self.b) else None,
            b_ub=self.b if len(self.b) else None,
            bounds=[(0.0, None)] * self.n_x
            + list(zip(lower.tolist(), upper.tolist(), strict=True)),
            method="highs",
        )
        if result.status == 2:
            return SolveStatus.infeasible, float("-inf"), lower
        if result.status == 3:
            return SolveStatus.unbounded, float("inf"), lower
        if result.status != 0:
            raise NumericError(f"Relaxation failed: {result.message}")
        return SolveStatus.optimal, -float(result.fun), result.x[self.n_x :]


def solve_milp(
    model: ParametricMilp, theta: Vector, extra_rows: Cuts | None = None
) -> MilpSolution:
    """Best-bound branch-and-bound on the binaries, branching on the most
    fractional one.

    Node relaxations go to HiGHS; the integral leaves are re-solved with the
    simplex above so the returned point and objective match ``solve_lp``.
    """
    tol = settings.tolerances
    cuts = extra_rows or Cuts.empty(model.n_x, model.n_y)
    q = model.n_y
    if q == 0:
        lp = _solve_fixed(model, theta, np.zeros(0), cuts)
        return MilpSolution(lp.status, lp.x, lp.y, lp.objective, nodes=1)
    relaxation = _Relaxation.of(model, model.rhs(theta), cuts)
    counter = itertools.count()
    heap = [_Node(float("-inf"), next(counter), ())]
    best: LpSolution | None = None
    nodes = 0
    while heap:
        node = heapq.heappop(heap)
        bound = -node.priority
        if best is not None and bound <= best.objective + tol.gap:
            continue
        nodes += 1
        if nodes > settings.max_nodes:
            raise ResourceLimitError(
                f"Branch-and-bound exceeded {settings.max_nodes} nodes."
            )
        status, objective, y = relaxation.solve(node.fixed)
        if status == SolveStatus.unbounded:
            return MilpSolution(SolveStatus.unbounded, nodes=nodes)
        if status == SolveStatus.infeasible:
            continue
        if best is not None and objective <= best.objective + tol.gap:
            continue
        distance = np.abs(y - np.round(y))
        if distance.max() <= tol.integrality:
            candidate = _solve_fixed(model, theta, np.round(y), cuts)
            if candidate.is_optimal and (
                best is None or candidate.objective > best.objective
            ):
                best = candidate
            if candidate.is_optimal or len(node.fixed) == q:
                continue
        fixed_idx = {j for j, _ in node.fixed}
        free = np.array([j for j in range(q) if j not in fixed_idx])
        branch = int(free[np.argmin(np.abs(y[free] - 0.5))])
        for value in (1, 0):
            heapq.heappush(
                heap,
                _Node(-objective, next(counter), (*node.fixed, (branch, value))),
            )
    _logger.debug(f"Branch-and-bound explored {nodes} nodes.")
    if best is None:
        return MilpSolution(SolveStatus.infeasible, nodes=nodes)
    return MilpSolution(
        SolveStatus.optimal, best.x, best.y, best.objective, nodes=nodes
    )


def brute_force_milp(
    model: ParametricMilp, theta: Vector, extra_rows: Cuts | None = None
) -> MilpSolution:
    """Enumerate every binary assignment; exact reference for small models."""
    q = model.n_y
    if q > BRUTE_FORCE_LIMIT:
        raise UsageError(
            f"Brute force is limited to {BRUTE_FORCE_LIMIT} binaries, got {q}."
        )
    best: LpSolution | None = None
    count = 0
    for bits in itertools.product((0.0, 1.0), repeat=q):
        count += 1
        lp = _solve_fixed(model, theta, np.array(bits), extra_rows)
        if lp.is_optimal and (best is None or lp.objective > best.objective):
            best = lp
    if best is None:
        return MilpSolution(SolveStatus.infeasible, nodes=count)
    return MilpSolution(SolveStatus.optimal, best.x, best.y, best.objective, count)


def _format_terms(coefs: Vector, names: tuple[str, ...] | list[str]) -> str:
    terms = [
        f"{'+' if v >= 0 else '-'} {abs(v):.10g} {name}"
        for v, name in zip(coefs, names, strict=True)
        if v != 0
    ]
    return " ".join(terms) or "0"


def dump_lp(model: ParametricMilp, path: Path, theta: Vector | None = None) -> None:
    """Write the model as LP-style text, with theta terms or theta substituted."""
    x_names = list(model.x_names or [f"x[{j}]" for j in range(model.n_x)])
    y_names = list(model.y_names or [f"y[{j}]" for j in range(model.n_y)])
    t_names = [f"theta[{k}]" for k in range(model.n_theta)]
    lines = [
        "\\ carryover parametric model",
        "maximize",
        "  obj: "
        + _format_terms(np.concatenate([model.c, model.d]), x_names + y_names),
        "subject to",
    ]
    for i, tag in enumerate(model.row_tags):
        lhs = _format_terms(np.concatenate([model.A[i], model.E[i]]), x_names + y_names)
        if theta is None:
            rhs = f"{model.b[i]:.10g}"
            if model.n_theta and model.F[i].any():
                rhs += " " + _format_terms(model.F[i], t_names)
        else:
            rhs = f"{model.rhs(np.asarray(theta, dtype=float))[i]:.10g}"
        lines.append(f"  {tag}: {lhs} <= {rhs}")
    lines.append("binaries")
    lines.extend(f"  {name}" for name in y_names)
    lines.append("end")
    path.write_text("\n".join(lines) + "\n")
