from pathlib import Path

import numpy as np
import pytest

from carryover.builder import ModelBuilder
from carryover.exceptions import BigMError, InputError
from carryover.rules import (
    AffinePiece,
    CriticalRegion,
    Inequality,
    RulesMeta,
    ValuationRules,
    check_exhaustive,
    emit_milp_constraints,
    evaluate_rules,
    export_surface_csv,
    load_rules,
    locate_region,
    save_rules,
)
from carryover.solver import solve_milp


def _make_region(
    id: int, *, lower: float, upper: float, pi: float, v_min: float = 0.0
) -> CriticalRegion:
    return CriticalRegion(
        id=id,
        ineqs=[Inequality(e=[-1.0], f=lower), Inequality(e=[1.0], f=-upper)],
        y_star=[id],
        pi=[pi],
        value=AffinePiece(a=[pi], g=-pi * v_min),
        center=[(lower + upper) / 2],
        radius=(upper - lower) / 2,
    )


def _make_rules(*, gap: float = 0.0) -> ValuationRules:
    return ValuationRules(
        regions=[
            _make_region(0, lower=0.0, upper=0.5 - gap, pi=2.0),
            _make_region(1, lower=0.5 + gap, upper=1.0, pi=1.5),
        ],
        v_min=[0.0],
        v_max=[1.0],
        meta=RulesMeta(system="toy", reservoir_ids=["r"], wall_time=1.5),
    )


def test_evaluate_rules() -> None:
    rules = _make_rules()
    assert locate_region(rules, np.array([0.2])).id == 0
    assert locate_region(rules, np.array([0.8])).id == 1
    # shared boundary goes to the lowest id
    assert locate_region(rules, np.array([0.5])).id == 0
    assert evaluate_rules(rules, np.array([0.2])) == pytest.approx(0.4)
    assert evaluate_rules(rules, np.array([0.8])) == pytest.approx(1.2)
    assert rules.mean_pi() == pytest.approx([1.75])


def test_nearest_region() -> None:
    rules = _make_rules(gap=0.1)
    assert locate_region(rules, np.array([0.45])).id == 0
    assert locate_region(rules, np.array([0.58])).id == 1
    report = check_exhaustive(rules, points=1000)
    assert report.points == 1000
    assert 100 < report.uncovered < 300
    assert report.overlapping == 0


def test_save_and_load(tmp_path: Path) -> None:
    rules = _make_rules()
    path = tmp_path / "rules.json"
    save_rules(rules, path)
    assert "wall_time" not in path.read_text()
    loaded = load_rules(path)
    assert loaded.meta.wall_time == 0.0
    assert loaded.regions == rules.regions
    assert loaded.meta.reservoir_ids == ["r"]
    path.write_text('{"regions": 1}')
    with pytest.raises(InputError):
        load_rules(path)
    with pytest.raises(InputError):
        load_rules(tmp_path / "missing.json")


def test_emit_milp_constraints() -> None:
    rules = _make_rules()
    mb = ModelBuilder()
    storage = mb.add_continuous("storage")
    block = emit_milp_constraints(rules, mb, [storage])
    mb.maximize(block.value)
    model = mb.build()
    assert "rules:one-region:upper" in model.row_tags
    assert "rules:region[0,1]" in model.row_tags
    milp = solve_milp(model, np.zeros(0))
    assert milp.objective == pytest.approx(1.5)
    assert milp.x is not None and milp.y is not None
    assert milp.x[storage.index] == pytest.approx(1.0)
    assert [z.index for z in block.indicators] == [0, 1]
    assert list(milp.y) == [0.0, 1.0]
    grid = np.linspace(0.0, 1.0, 101)
    assert max(evaluate_rules(rules, np.array([v])) for v in grid) == pytest.approx(
        milp.objective
    )


def test_emit_fixed_storage() -> None:
    rules = _make_rules()
    for level, expected in ((0.3, 0.6), (0.7, 1.05)):
        mb = ModelBuilder()
        storage = mb.add_continuous("storage")
        mb.add_eq(storage, level, "pin")
        block = emit_milp_constraints(rules, mb, [storage])
        mb.maximize(block.value)
        milp = solve_milp(mb.build(), np.zeros(0))
        assert milp.objective == pytest.approx(expected)


def test_emit_big_m_too_small() -> None:
    mb = ModelBuilder()
    storage = mb.add_continuous("storage")
    with pytest.raises(BigMError):
        emit_milp_constraints(_make_rules(), mb, [storage], big_m=0.1)


def test_export_surface_csv(tmp_path: Path) -> None:
    path = tmp_path / "surface.csv"
    export_surface_csv([([0.2, 0.3], 4, 12.5)], path, ["up", "down"])
    assert path.read_text().splitlines() == [
        "theta_up,theta_down,region_id,F_mwh",
        "0.2,0.3,4,12.5",
    ]
