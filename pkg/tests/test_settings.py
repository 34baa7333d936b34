from pathlib import Path

import pytest
from pydantic import ValidationError

from carryover.settings import Settings, settings


def test_test_env() -> None:
    assert settings.seed == 0
    assert settings.max_workers == 2
    assert settings.max_regions == 2000


def test_nested_tolerances(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("CARRYOVER_TOLERANCES__REGION", "1e-5")
    assert Settings().tolerances.region == 1e-5
    assert Settings().tolerances.gap == 1e-8


@pytest.mark.parametrize("omega", [0.0, 1.0, 1.5])
def test_omega_outside_unit_interval(omega: float) -> None:
    with pytest.raises(ValidationError):
        Settings(omega=omega)


def test_output_dir(tmp_path: Path) -> None:
    assert Settings(output_dir=tmp_path).output_dir == tmp_path
    assert Settings(output_dir="").output_dir == Path.cwd()
    not_a_dir = tmp_path / "file"
    not_a_dir.write_text("")
    with pytest.raises(ValidationError):
        Settings(output_dir=not_a_dir)
