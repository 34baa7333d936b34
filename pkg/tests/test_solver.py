from pathlib import Path

import numpy as np
import pytest
from pytest_mock import MockerFixture
from scipy.optimize import linprog

from carryover.exceptions import ResourceLimitError, UsageError
from carryover.settings import settings
from carryover.solver import (
    Cuts,
    ParametricMilp,
    SolveStatus,
    brute_force_milp,
    dump_lp,
    solve_lp,
    solve_milp,
)


def _make_model(
    A: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    *,
    E: np.ndarray | None = None,
    d: np.ndarray | None = None,
    F: np.ndarray | None = None,
) -> ParametricMilp:
    m = len(b)
    E = np.zeros((m, 0)) if E is None else E
    return ParametricMilp(
        c=c,
        d=np.zeros(E.shape[1]) if d is None else d,
        A=A,
        E=E,
        b=b,
        F=np.zeros((m, 0)) if F is None else F,
        row_tags=tuple(f"row[{i}]" for i in range(m)),
    )


@pytest.mark.parametrize("seed", range(10))
def test_lp_against_highs(seed: int) -> None:
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.1, 1.0, (5, 4))
    b = rng.uniform(1.0, 5.0, 5)
    c = rng.uniform(-0.5, 1.0, 4)
    model = _make_model(A, b, c)
    lp = solve_lp(model, np.zeros(0))
    ref = linprog(-c, A_ub=A, b_ub=b, bounds=(0, None), method="highs")
    assert lp.is_optimal
    assert lp.objective == pytest.approx(-ref.fun, abs=1e-7)
    assert lp.x is not None and lp.duals is not None
    assert np.all(A @ lp.x <= b + 1e-7)
    # dual feasibility and strong duality
    assert np.all(lp.duals >= -1e-9)
    assert np.all(A.T @ lp.duals >= c - 1e-7)
    assert lp.duals @ b == pytest.approx(lp.objective, abs=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_milp_against_brute_force(seed: int) -> None:
    rng = np.random.default_rng(100 + seed)
    A = rng.uniform(0.1, 1.0, (4, 3))
    E = rng.uniform(-1.0, 1.0, (4, 4))
    b = rng.uniform(2.0, 5.0, 4)
    model = _make_model(
        A, b, rng.uniform(0.0, 1.0, 3), E=E, d=rng.uniform(-1.0, 1.0, 4)
    )
    milp = solve_milp(model, np.zeros(0))
    ref = brute_force_milp(model, np.zeros(0))
    assert milp.is_optimal and ref.is_optimal
    assert milp.objective == pytest.approx(ref.objective, abs=1e-7)
    assert milp.y is not None
    assert set(np.unique(milp.y)) <= {0.0, 1.0}


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(50))
def test_larger_milp_against_brute_force(seed: int) -> None:
    rng = np.random.default_rng(1000 + seed)
    q = 2 + seed % 11
    A = rng.uniform(0.1, 1.0, (6, 4))
    E = rng.uniform(-1.0, 1.0, (6, q))
    b = rng.uniform(2.0, 5.0, 6)
    model = _make_model(
        A, b, rng.uniform(0.0, 1.0, 4), E=E, d=rng.uniform(-1.0, 1.0, q)
    )
    milp = solve_milp(model, np.zeros(0))
    ref = brute_force_milp(model, np.zeros(0))
    assert milp.is_optimal and ref.is_optimal
    assert milp.objective == pytest.approx(ref.objective, abs=1e-8)
    assert milp.x is not None and milp.y is not None
    assert np.all(A @ milp.x + E @ milp.y <= b + 1e-7)


def test_milp_with_cuts() -> None:
    # max x + y0 + y1 with x <= 1, both binaries free
    model = _make_model(
        np.array([[1.0]]),
        np.array([1.0]),
        np.array([1.0]),
        E=np.zeros((1, 2)),
        d=np.array([1.0, 1.0]),
    )
    assert solve_milp(model, np.zeros(0)).objective == pytest.approx(3.0)
    # y0 + y1 <= 1
    cut = Cuts(np.zeros((1, 1)), np.array([[1.0, 1.0]]), np.array([1.0]), ("cut",))
    milp = solve_milp(model, np.zeros(0), cut)
    assert milp.objective == pytest.approx(2.0)
    assert milp.y is not None and milp.y.sum() == 1.0


@pytest.mark.parametrize("seed", range(3))
def test_lp_refactorization(seed: int) -> None:
    # enough pivots to pass several refactorizations of the basis inverse;
    # rows with b = 0 are degenerate, the last row bounds the problem
    rng = np.random.default_rng(50 + seed)
    A = np.vstack([rng.uniform(-0.5, 1.0, (150, 200)), np.ones((1, 200))])
    b = np.where(rng.random(150) < 0.3, 0.0, rng.uniform(1.0, 5.0, 150))
    b = np.append(b, 100.0)
    c = rng.uniform(0.1, 1.0, 200)
    lp = solve_lp(_make_model(A, b, c), np.zeros(0))
    ref = linprog(-c, A_ub=A, b_ub=b, bounds=(0, None), method="highs")
    assert lp.is_optimal
    assert lp.objective == pytest.approx(-ref.fun, rel=1e-6)
    assert lp.duals is not None
    assert lp.duals @ b == pytest.approx(lp.objective, rel=1e-8, abs=1e-7)


def test_knapsack_and_node_limit(mocker: MockerFixture) -> None:
    # max 3 y1 + 2 y2 s.t. 2 y1 + 2 y2 <= 3
    model = _make_model(
        np.zeros((1, 0)),
        np.array([3.0]),
        np.zeros(0),
        E=np.array([[2.0, 2.0]]),
        d=np.array([3.0, 2.0]),
    )
    milp = solve_milp(model, np.zeros(0))
    assert milp.objective == pytest.approx(3.0)
    assert milp.y is not None and milp.y.tolist() == [1.0, 0.0]
    mocker.patch.object(settings, "max_nodes", 1)
    with pytest.raises(ResourceLimitError):
        solve_milp(model, np.zeros(0))


def test_theta_rhs() -> None:
    # max x s.t. x <= 1 + 2 theta
    model = _make_model(
        np.array([[1.0]]), np.array([1.0]), np.array([1.0]), F=np.array([[2.0]])
    )
    assert solve_lp(model, np.array([0.5])).objective == pytest.approx(2.0)
    assert solve_lp(model, np.array([1.5])).objective == pytest.approx(4.0)
    with pytest.raises(UsageError):
        solve_lp(model, np.zeros(0))
    # lifting theta: max x with x - 2 t <= 1 and t <= 3 gives 7
    lifted = model.lift_theta().with_rows(
        Cuts(np.array([[0.0, 1.0]]), np.zeros((1, 0)), np.array([3.0]), ("t-max",))
    )
    assert lifted.n_theta == 0
    assert solve_lp(lifted, np.zeros(0)).objective == pytest.approx(7.0)


def test_statuses() -> None:
    infeasible = _make_model(np.array([[1.0]]), np.array([-1.0]), np.array([1.0]))
    assert solve_lp(infeasible, np.zeros(0)).status == SolveStatus.infeasible
    assert solve_milp(infeasible, np.zeros(0)).status == SolveStatus.infeasible
    unbounded = _make_model(np.array([[-1.0]]), np.array([1.0]), np.array([1.0]))
    assert solve_lp(unbounded, np.zeros(0)).status == SolveStatus.unbounded


def test_usage_errors() -> None:
    model = _make_model(
        np.array([[1.0]]), np.array([1.0]), np.array([1.0]), E=np.ones((1, 1))
    )
    with pytest.raises(UsageError):
        solve_lp(model, np.zeros(0))
    with pytest.raises(UsageError):
        solve_lp(model, np.zeros(0), np.zeros(2))
    with pytest.raises(UsageError):
        _make_model(np.ones((2, 1)), np.array([1.0]), np.array([1.0]))
    assert model.row_index("row[0]") == 0


def test_dump_lp(tmp_path: Path) -> None:
    model = _make_model(
        np.array([[1.0, -2.0]]),
        np.array([4.0]),
        np.array([1.0, 0.0]),
        F=np.array([[3.0]]),
    )
    path = tmp_path / "model.lp"
    dump_lp(model, path)
    text = path.read_text()
    assert "row[0]: + 1 x[0] - 2 x[1] <= 4 + 3 theta[0]" in text
    dump_lp(model, path, theta=np.array([1.0]))
    assert "row[0]: + 1 x[0] - 2 x[1] <= 7" in path.read_text()
