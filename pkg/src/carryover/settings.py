from pathlib import Path
from typing import Annotated

from pydantic import BaseModel, BeforeValidator, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


def validate_output_dir(v: str | Path | None) -> Path:
    if not v:
        return Path.cwd()
    p = Path(v)
    if p.exists() and not p.is_dir():
        raise ValueError(f"Not a directory: {p}")
    return p


class Tolerances(BaseModel):
    # Primal feasibility, on row-scaled data.
    feasibility: float = 1e-9
    # Distance of a relaxed binary to {0, 1} accepted as integral.
    integrality: float = 1e-6
    # Absolute optimality gap of branch-and-bound.
    gap: float = 1e-8
    # Chebyshev radius below which a region is considered flat, and boundary
    # tolerance of region membership.
    region: float = 1e-7


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="CARRYOVER_", env_nested_delimiter="__"
    )

    # Where the CLI writes rules, reports and CSV files when --out is not given.
    output_dir: Annotated[Path, BeforeValidator(validate_output_dir)] = Path(".")
    # The file with the python logging configuration (YAML dictConfig).
    log_config: str | None = None
    # Maximum number of worklist tuples processed by one partition run.
    max_regions: int = 10_000
    # Maximum number of branch-and-bound nodes of one MILP solve.
    max_nodes: int = 100_000
    # Width of the thread pool used for dual extraction and Monte-Carlo checks.
    max_workers: int = 4
    # Binary expansion resolution of the discharge phase length.
    omega: float = 0.75
    # Length of the current period, weeks.
    current_weeks: int = 4
    # Length of the future period, weeks.
    future_weeks: int = 4
    # Default seed of synthetic forecasts, truth processes and samplers.
    seed: int = 0
    # Merge adjacent final regions that carry identical binaries and value pieces.
    merge_regions: bool = True
    # Keep the pointwise best of the incumbent and the new value piece when an
    # improving binary solution partitions a region.
    compare_incumbents: bool = True
    # Add spill terms to the intermediate storage checks of the future model.
    intermediate_spill: bool = False
    tolerances: Tolerances = Tolerances()

    @field_validator("omega")
    def validate_omega(cls, v: float) -> float:
        if not 0 < v < 1:
            raise ValueError("omega must lie in (0, 1).")
        return v


settings = Settings()
