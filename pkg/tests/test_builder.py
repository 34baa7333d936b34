import numpy as np
import pytest

from carryover.builder import LinExpr, ModelBuilder, lin_sum
from carryover.exceptions import UsageError
from carryover.models import PiecewiseCurve
from carryover.solver import solve_lp, solve_milp

CURVE = PiecewiseCurve(breakpoints=[(0, 0), (4, 10), (10, 18)])


def test_rows_and_theta() -> None:
    mb = ModelBuilder(n_theta=1)
    x = mb.add_continuous("x")
    mb.add_le(x, mb.theta(0) + 1.0, "x-max")
    mb.maximize(2 * x)
    model = mb.build()
    assert model.row_tags == ("x-max",)
    # x <= 1 + theta
    assert model.A[0] == pytest.approx([1.0])
    assert model.b[0] == pytest.approx(1.0)
    assert model.F[0] == pytest.approx([1.0])
    assert solve_lp(model, np.array([2.0])).objective == pytest.approx(6.0)


def test_equality_tags() -> None:
    mb = ModelBuilder()
    x = mb.add_continuous("x", upper=5.0)
    mb.add_eq(x + x, 4.0, "pin")
    mb.maximize(x)
    model = mb.build()
    assert model.row_tags == ("x:bound", "pin:upper", "pin:lower")
    lp = solve_lp(model, np.zeros(0))
    assert lp.objective == pytest.approx(2.0)


def test_usage_errors() -> None:
    mb = ModelBuilder(n_theta=1)
    x = mb.add_continuous("x")
    mb.add_le(x, 1.0, "tag")
    with pytest.raises(UsageError):
        mb.add_le(x, 2.0, "tag")
    with pytest.raises(UsageError):
        mb.theta(1)
    with pytest.raises(UsageError):
        mb.maximize(x + mb.theta(0))
    with pytest.raises(UsageError):
        mb.linearize_product(mb.add_binary("b"), x, float("inf"), "w")
    with pytest.raises(UsageError):
        mb.linearize_product(x, x, 1.0, "w")  # type: ignore[arg-type]


@pytest.mark.parametrize(("on", "expected"), [(1.0, 3.0), (0.0, 0.0)])
def test_linearize_product(on: float, expected: float) -> None:
    mb = ModelBuilder()
    b = mb.add_binary("b")
    z = mb.add_continuous("z", upper=3.0)
    w = mb.linearize_product(b, z, 3.0, "w")
    mb.maximize(w)
    lp = solve_lp(mb.build(), np.zeros(0), np.array([on]))
    assert lp.objective == pytest.approx(expected)


def test_linearize_product_lower_side() -> None:
    # with z pinned at 2 and b = 1, minimizing w still gives w = 2
    mb = ModelBuilder()
    b = mb.add_binary("b")
    z = mb.add_continuous("z")
    mb.add_eq(z, 2.0, "pin")
    w = mb.linearize_product(b, z, 3.0, "w")
    mb.maximize(-1 * w)
    lp = solve_lp(mb.build(), np.zeros(0), np.array([1.0]))
    assert lp.objective == pytest.approx(-2.0)


def test_linearize_signed_product() -> None:
    mb = ModelBuilder()
    b = mb.add_binary("b")
    z = mb.add_continuous("z")
    mb.add_eq(z, 1.0, "pin")
    w = mb.linearize_signed_product(b, LinExpr.of(z) - 3.0, 5.0, "w")
    mb.maximize(w)
    mb.add_le(w, 10.0, "cap")
    model = mb.build()
    # b * (z - 3) with z = 1
    assert solve_lp(model, np.zeros(0), np.array([1.0])).objective == pytest.approx(
        -2.0
    )
    assert solve_lp(model, np.zeros(0), np.array([0.0])).objective == pytest.approx(
        0.0
    )


def test_piecewise_curve() -> None:
    mb = ModelBuilder()
    unit = mb.add_piecewise_curve(CURVE, "u")
    mb.add_eq(unit.discharge, 7.0, "discharge")
    mb.maximize(unit.power)
    model = mb.build()
    assert len(unit.segments) == 2
    milp = solve_milp(model, np.zeros(0))
    assert milp.objective == pytest.approx(14.0)
    assert milp.x is not None and milp.y is not None
    assert list(milp.y) == [0.0, 1.0]
    assert unit.on.value(milp.x, milp.y) == pytest.approx(1.0)


def test_piecewise_curve_off_and_p_min() -> None:
    mb = ModelBuilder()
    unit = mb.add_piecewise_curve(CURVE, "u", p_min=12.0)
    mb.maximize(lin_sum([unit.power]) * -1)
    model = mb.build()
    # cheapest is OFF
    milp = solve_milp(model, np.zeros(0))
    assert milp.objective == pytest.approx(0.0)
    # forcing the first segment ON violates the minimum power
    lp = solve_lp(model, np.zeros(0), np.array([1.0, 0.0]))
    assert not lp.is_optimal
    lp = solve_lp(model, np.zeros(0), np.array([0.0, 1.0]))
    assert lp.objective == pytest.approx(-12.0)
