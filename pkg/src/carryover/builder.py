"""Variables, linear expressions and tagged rows shared by every model builder."""

import math
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import UsageError
from .models import PiecewiseCurve
from .solver import ParametricMilp, Vector


class VarKind(str, Enum):
    continuous = "continuous"  # x >= 0
    binary = "binary"  # y in {0, 1}


@dataclass(frozen=True)
class Var:
    __array_ufunc__ = None  # numpy scalars defer to the reflected operators

    kind: VarKind
    index: int
    name: str

    def expr(self) -> "LinExpr":
        return LinExpr({self: 1.0})

    def __add__(self, other: "Operand") -> "LinExpr":
        return self.expr() + other

    def __radd__(self, other: "Operand") -> "LinExpr":
        return self.expr() + other

    def __sub__(self, other: "Operand") -> "LinExpr":
        return self.expr() - other

    def __rsub__(self, other: "Operand") -> "LinExpr":
        return -self.expr() + other

    def __mul__(self, k: float) -> "LinExpr":
        return self.expr() * k

    def __rmul__(self, k: float) -> "LinExpr":
        return self.expr() * k

    def __neg__(self) -> "LinExpr":
        return self.expr() * -1.0


class LinExpr:
    """sum(coef * var) + sum(coef * theta_k) + constant."""

    __slots__ = ("constant", "terms", "theta")
    __array_ufunc__ = None

    def __init__(
        self,
        terms: dict[Var, float] | None = None,
        theta: dict[int, float] | None = None,
        constant: float = 0.0,
    ) -> None:
        self.terms = dict(terms or {})
        self.theta = dict(theta or {})
        self.constant = float(constant)

    @classmethod
    def of(cls, value: "Operand") -> "LinExpr":
        if isinstance(value, LinExpr):
            return value
        if isinstance(value, Var):
            return value.expr()
        return cls(constant=float(value))

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.theta, self.constant)

    def __add__(self, other: "Operand") -> "LinExpr":
        other = LinExpr.of(other)
        result = self.copy()
        for var, coef in other.terms.items():
            result.terms[var] = result.terms.get(var, 0.0) + coef
        for k, coef in other.theta.items():
            result.theta[k] = result.theta.get(k, 0.0) + coef
        result.constant += other.constant
        return result

    __radd__ = __add__

    def __sub__(self, other: "Operand") -> "LinExpr":
        return self + LinExpr.of(other) * -1.0

    def __rsub__(self, other: "Operand") -> "LinExpr":
        return LinExpr.of(other) - self

    def __mul__(self, k: float) -> "LinExpr":
        k = float(k)
        return LinExpr(
            {v: c * k for v, c in self.terms.items()},
            {t: c * k for t, c in self.theta.items()},
            self.constant * k,
        )

    __rmul__ = __mul__

    def __neg__(self) -> "LinExpr":
        return self * -1.0

    def value(self, x: Vector, y: Vector, theta: Vector | None = None) -> float:
        total = self.constant
        for var, coef in self.terms.items():
            total += coef * (x if var.kind == VarKind.continuous else y)[var.index]
        if self.theta:
            if theta is None:
                raise UsageError("Expression depends on theta, none given.")
            total += sum(coef * theta[k] for k, coef in self.theta.items())
        return float(total)


Operand = LinExpr | Var | float | int


def lin_sum(items: Iterable[Operand]) -> LinExpr:
    total = LinExpr()
    for item in items:
        total = total + item
    return total


@dataclass
class _Row:
    expr: LinExpr  # expr <= 0
    tag: str


@dataclass(frozen=True)
class CurveVars:
    """Discharge, power and ON indicator of one unit, as expressions."""

    discharge: LinExpr
    power: LinExpr
    on: LinExpr
    segments: tuple[Var, ...]


class ModelBuilder:
    """Accumulates variables and tagged ``<=`` rows into a :class:`ParametricMilp`.

    Equalities become two rows tagged ``<tag>:upper`` and ``<tag>:lower``.
    """

    def __init__(self, n_theta: int = 0) -> None:
        self.n_theta = n_theta
        self.continuous: list[Var] = []
        self.binaries: list[Var] = []
        self.rows: list[_Row] = []
        self.objective = LinExpr()
        self._tags: set[str] = set()

    def add_continuous(self, name: str, upper: float | None = None) -> Var:
        var = Var(VarKind.continuous, len(self.continuous), name)
        self.continuous.append(var)
        if upper is not None:
            self.add_le(var, upper, f"{name}:bound")
        return var

    def add_binary(self, name: str) -> Var:
        var = Var(VarKind.binary, len(self.binaries), name)
        self.binaries.append(var)
        return var

    def theta(self, k: int) -> LinExpr:
        if not 0 <= k < self.n_theta:
            raise UsageError(f"theta index {k} outside [0, {self.n_theta}).")
        return LinExpr(theta={k: 1.0})

    def add_le(self, lhs: Operand, rhs: Operand, tag: str) -> None:
        if tag in self._tags:
            raise UsageError(f"Duplicate row tag {tag}.")
        self._tags.add(tag)
        self.rows.append(_Row(LinExpr.of(lhs) - rhs, tag))

    def add_ge(self, lhs: Operand, rhs: Operand, tag: str) -> None:
        self.add_le(rhs, lhs, tag)

    def add_eq(self, lhs: Operand, rhs: Operand, tag: str) -> None:
        self.add_le(lhs, rhs, f"{tag}:upper")
        self.add_ge(lhs, rhs, f"{tag}:lower")

    def maximize(self, expr: Operand) -> None:
        expr = LinExpr.of(expr)
        if expr.theta or expr.constant:
            raise UsageError("The objective must be a combination of variables.")
        self.objective = expr

    def linearize_product(self, b: Var, z: Operand, z_max: float, name: str) -> Var:
        """A variable w equal to b * z, for binary b and 0 <= z <= z_max."""
        if b.kind != VarKind.binary:
            raise UsageError(f"{b.name} is not a binary variable.")
        if not math.isfinite(z_max) or z_max < 0:
            raise UsageError(f"Product {name} needs a finite bound, got {z_max}.")
        w = self.add_continuous(name)
        self.add_le(w, z_max * b, f"{name}:on")
        self.add_le(w, z, f"{name}:z")
        self.add_ge(w, LinExpr.of(z) - z_max * (1 - b.expr()), f"{name}:off")
        return w

    def linearize_signed_product(
        self, b: Var, z: Operand, bound: float, name: str
    ) -> LinExpr:
        """An expression equal to b * z, for binary b and -bound <= z <= bound."""
        shifted = self.linearize_product(b, LinExpr.of(z) + bound, 2 * bound, name)
        return shifted - bound * b.expr()

    def add_piecewise_curve(
        self, curve: PiecewiseCurve, name: str, p_min: float = 0.0
    ) -> CurveVars:
        """One binary per curve segment; ON means some segment is selected.

        The power is the interpolated curve value at the discharge, with no
        convexity assumption. OFF forces discharge and power to zero.
        """
        segments: list[Var] = []
        discharge = LinExpr()
        power = LinExpr()
        pieces = list(curve.segments()) or [
            (curve.breakpoints[0][0], curve.breakpoints[0][1]) * 2
        ]
        for s, (d0, p0, d1, p1) in enumerate(pieces):
            sigma = self.add_binary(f"{name}:seg[{s}]")
            segments.append(sigma)
            discharge = discharge + d0 * sigma
            power = power + p0 * sigma
            if d1 > d0:
                delta = self.add_continuous(f"{name}:delta[{s}]")
                self.add_le(delta, (d1 - d0) * sigma, f"{name}:delta[{s}]")
                discharge = discharge + delta
                power = power + ((p1 - p0) / (d1 - d0)) * delta
        on = lin_sum(segments)
        self.add_le(on, 1.0, f"{name}:one-segment")
        if p_min > 0:
            self.add_ge(power, p_min * on, f"{name}:p-min")
        return CurveVars(discharge, power, on, tuple(segments))

    def build(self) -> ParametricMilp:
        p, q, m = len(self.continuous), len(self.binaries), len(self.rows)
        A = np.zeros((m, p))
        E = np.zeros((m, q))
        b = np.zeros(m)
        F = np.zeros((m, self.n_theta))
        for i, row in enumerate(self.rows):
            for var, coef in row.expr.terms.items():
                (A if var.kind == VarKind.continuous else E)[i, var.index] += coef
            for k, coef in row.expr.theta.items():
                F[i, k] -= coef
            b[i] = -row.expr.constant
        c = np.zeros(p)
        d = np.zeros(q)
        for var, coef in self.objective.terms.items():
            (c if var.kind == VarKind.continuous else d)[var.index] += coef
        return ParametricMilp(
            c=c,
            d=d,
            A=A,
            E=E,
            b=b,
            F=F,
            row_tags=tuple(row.tag for row in self.rows),
            x_names=tuple(v.name for v in self.continuous),
            y_names=tuple(v.name for v in self.binaries),
        )
