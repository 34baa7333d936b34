import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import UsageError
from .settings import settings
from .solver import Matrix, ParametricMilp, SolveStatus, Vector, solve_lp

_logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Polytope:
    """The set {theta | E theta + f <= 0}."""

    E: Matrix
    f: Vector

    @classmethod
    def box(cls, lower: Vector, upper: Vector) -> "Polytope":
        n = len(lower)
        eye = np.eye(n)
        return cls(
            np.vstack([-eye, eye]),
            np.concatenate([np.asarray(lower, dtype=float), -np.asarray(upper)]),
        )

    @property
    def dim(self) -> int:
        return int(self.E.shape[1])

    def __len__(self) -> int:
        return len(self.f)

    def intersect(self, other: "Polytope") -> "Polytope":
        return Polytope(np.vstack([self.E, other.E]), np.concatenate([self.f, other.f]))

    def with_row(self, e: Vector, f: float) -> "Polytope":
        return Polytope(np.vstack([self.E, e[None, :]]), np.append(self.f, f))

    def reversed_row(self, i: int) -> "Polytope":
        """The single half-space on the other side of row i."""
        return Polytope(-self.E[i : i + 1], -self.f[i : i + 1])

    def violation(self, theta: Vector) -> float:
        """Largest normalized row value at theta; <= 0 inside."""
        if not len(self):
            return float("-inf")
        norms = np.linalg.norm(self.E, axis=1)
        norms[norms == 0] = 1.0
        return float(np.max((self.E @ theta + self.f) / norms))

    def contains(self, theta: Vector, tol: float | None = None) -> bool:
        if tol is None:
            tol = settings.tolerances.region
        return self.violation(np.asarray(theta, dtype=float)) <= tol

    def to_json(self) -> list[dict[str, object]]:
        return [
            {"e": e.tolist(), "f": float(f)}
            for e, f in zip(self.E, self.f, strict=True)
        ]

    @classmethod
    def from_json(cls, rows: list[dict[str, object]], dim: int) -> "Polytope":
        if not rows:
            return cls(np.zeros((0, dim)), np.zeros(0))
        E = np.array([row["e"] for row in rows], dtype=float)
        f = np.array([row["f"] for row in rows], dtype=float)
        return cls(E, f)


@dataclass(frozen=True, eq=False)
class ChebyshevBall:
    status: SolveStatus
    center: Vector | None = None
    radius: float = 0.0


def _free_lp(c: Vector, A: Matrix, r: Vector) -> tuple[SolveStatus, Vector, float]:
    """max c'z s.t. A z <= r with z free, via z = z+ - z-."""
    n = len(c)
    model = ParametricMilp(
        c=np.concatenate([c, -c]),
        d=np.zeros(0),
        A=np.hstack([A, -A]),
        E=np.zeros((len(r), 0)),
        b=r,
        F=np.zeros((len(r), 0)),
        row_tags=tuple(f"row[{i}]" for i in range(len(r))),
    )
    lp = solve_lp(model, np.zeros(0))
    if not lp.is_optimal:
        return lp.status, np.zeros(n), float("-inf")
    assert lp.x is not None
    return lp.status, lp.x[:n] - lp.x[n:], lp.objective


def chebyshev_center(polytope: Polytope) -> ChebyshevBall:
    """Center and radius of the largest ball inside the polytope."""
    norms = np.linalg.norm(polytope.E, axis=1)
    n = polytope.dim
    # variables [theta+, theta-, r]
    model = ParametricMilp(
        c=np.concatenate([np.zeros(2 * n), [1.0]]),
        d=np.zeros(0),
        A=np.hstack([polytope.E, -polytope.E, norms[:, None]]),
        E=np.zeros((len(polytope), 0)),
        b=-polytope.f,
        F=np.zeros((len(polytope), 0)),
        row_tags=tuple(f"row[{i}]" for i in range(len(polytope))),
    )
    lp = solve_lp(model, np.zeros(0))
    if not lp.is_optimal:
        return ChebyshevBall(lp.status)
    assert lp.x is not None
    center = lp.x[:n] - lp.x[n : 2 * n]
    return ChebyshevBall(SolveStatus.optimal, center, float(lp.x[2 * n]))


def normalize(polytope: Polytope) -> Polytope:
    """Unit-norm rows without duplicates; all-zero rows that always hold are dropped."""
    norms = np.linalg.norm(polytope.E, axis=1)
    tol = settings.tolerances.region
    keep = (norms > 1e-12) | (polytope.f > tol)
    norms = np.where(norms > 1e-12, norms, 1.0)
    E = polytope.E[keep] / norms[keep, None]
    f = polytope.f[keep] / norms[keep]
    # duplicates, first occurrence wins
    _, first = np.unique(
        np.round(np.hstack([E, f[:, None]]), 9), axis=0, return_index=True
    )
    first.sort()
    return Polytope(E[first], f[first])


def remove_redundant(polytope: Polytope) -> Polytope:
    """Drop every row implied by the others, keeping the set unchanged.

    Row i is implied when maximizing its left side over the remaining rows, with row
    i itself relaxed by one unit to keep the problem bounded, stays <= 0.
    """
    reduced = normalize(polytope)
    tol = settings.tolerances.region
    kept = list(range(len(reduced)))
    for i in range(len(reduced)):
        relaxed_f = reduced.f.copy()
        relaxed_f[i] -= 1.0
        rows = [k for k in kept if k != i] + [i]
        status, _, value = _free_lp(reduced.E[i], reduced.E[rows], -relaxed_f[rows])
        if status == SolveStatus.optimal and value + reduced.f[i] <= tol:
            kept.remove(i)
        elif status == SolveStatus.infeasible:
            # the set is empty; nothing meaningful to reduce
            _logger.debug("Redundancy removal on an empty polytope.")
            return reduced
    return Polytope(reduced.E[kept], reduced.f[kept])


def bounding_box(polytope: Polytope) -> tuple[Vector, Vector]:
    """Smallest box containing the polytope."""
    n = polytope.dim
    lower, upper = np.empty(n), np.empty(n)
    for k in range(n):
        unit = np.zeros(n)
        unit[k] = 1.0
        for sign, out in ((1.0, upper), (-1.0, lower)):
            status, _, value = _free_lp(sign * unit, polytope.E, -polytope.f)
            if status != SolveStatus.optimal:
                raise UsageError(f"Polytope is {status.value} along axis {k}.")
            out[k] = sign * value
    return lower, upper
