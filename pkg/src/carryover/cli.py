import json
import logging
import logging.config
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Any

import numpy as np
import typer
import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .engine import PartitionEngine
from .exceptions import (
    CarryoverError,
    DomainViolation,
    InputError,
    NumericError,
    SimulationError,
    SystemInvalid,
    UsageError,
)
from .forecast import (
    ScalarGmm,
    dump_forecast,
    expected_future_inflow,
    gmm_quantile,
    load_forecast,
)
from .future import FutureModelConfig, aggregation_gap, build_future_model
from .models import CascadeSystem, dump_system, load_system, validate_system
from .planner import (
    PlanMode,
    PlanningProblem,
    solve_plan,
    write_plan_json,
    write_schedule_csv,
)
from .rules import (
    RulesMeta,
    check_exhaustive,
    export_surface_csv,
    load_rules,
    save_rules,
)
from .settings import settings
from .simulation import (
    CaseKind,
    SimConfig,
    TruthProcess,
    generate_case,
    run_rolling,
    sample_surface,
)
from .utils import stable_hash

_logger = logging.getLogger(__name__)

app = typer.Typer(no_args_is_help=True, add_completion=False)
console = Console()

# Exit status by exception class, first match wins.
EXIT_CODES: tuple[tuple[type[Exception], int], ...] = (
    (DomainViolation, 1),
    (InputError, 2),
    (UsageError, 2),
    (NumericError, 3),
)

SystemOption = Annotated[Path, typer.Option("--system", help="System JSON file.")]
ForecastOption = Annotated[
    Path, typer.Option("--forecast", help="Inflow forecast JSON file.")
]
RulesOption = Annotated[Path, typer.Option("--rules", help="Valuation rules file.")]
OutOption = Annotated[
    Path | None,
    typer.Option("--out", help="Output directory [default: CARRYOVER_OUTPUT_DIR]."),
]
JsonOption = Annotated[
    bool, typer.Option("--json", help="Machine-readable output on stdout.")
]
TOption = Annotated[int | None, typer.Option("--T", help="Current period, weeks.")]
LOption = Annotated[int | None, typer.Option("--L", help="Future period, weeks.")]
OmegaOption = Annotated[
    float | None, typer.Option("--omega", help="Phase length resolution.")
]
SeedOption = Annotated[int | None, typer.Option("--seed")]


def exit_code(error: Exception) -> int:
    if isinstance(error, SimulationError) and isinstance(error.cause, Exception):
        return exit_code(error.cause)
    for cls, code in EXIT_CODES:
        if isinstance(error, cls):
            return code
    return 1


@contextmanager
def _command() -> Iterator[None]:
    """Report library errors and turn them into exit codes."""
    try:
        yield
    except CarryoverError as e:
        _logger.error(str(e))
        raise typer.Exit(exit_code(e)) from e


def _out_dir(out: Path | None) -> Path:
    path = out or settings.output_dir
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit_json(payload: Any) -> None:
    typer.echo(json.dumps(payload, indent=2, sort_keys=True))


def _setup_logging(verbose: bool) -> None:
    if settings.log_config:
        try:
            config = yaml.safe_load(Path(settings.log_config).read_text())
        except OSError as e:
            raise typer.BadParameter(f"Cannot read {settings.log_config}: {e}") from e
        logging.config.dictConfig(config)
        return
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[
            RichHandler(
                console=Console(stderr=True), rich_tracebacks=True, show_path=False
            )
        ],
    )


@app.callback()
def main(
    verbose: Annotated[bool, typer.Option("--verbose", "-v")] = False,
) -> None:
    """Value carryover storage of cascaded hydropower and plan against it."""
    _setup_logging(verbose)


def _read_system(path: Path) -> CascadeSystem:
    if not path.is_file():
        raise InputError(f"System file {path} not found.")
    return load_system(path)


@app.command()
def validate(system: SystemOption, json_output: JsonOption = False) -> None:
    """Check a system file; exit 1 when it violates any rule."""
    with _command():
        try:
            loaded = load_system(system)
        except SystemInvalid as e:
            if json_output:
                _emit_json({"valid": False, "violations": e.violations})
            else:
                for violation in e.violations:
                    console.print(f"[red]✗[/red] {violation}")
            raise
        violations = [str(v) for v in validate_system(loaded)]
        if json_output:
            _emit_json({"valid": True, "violations": violations})
        else:
            console.print(
                f"[green]✓[/green] {loaded.name or system.name}: "
                f"{len(loaded.reservoirs)} reservoirs"
            )


@app.command()
def value(
    system: SystemOption,
    forecast: ForecastOption,
    out: OutOption = None,
    T: TOption = None,
    L: LOption = None,
    omega: OmegaOption = None,
    seed: SeedOption = None,
    json_output: JsonOption = False,
) -> None:
    """Partition the carryover storage box and write the valuation rules."""
    T = settings.current_weeks if T is None else T
    L = settings.future_weeks if L is None else L
    omega = settings.omega if omega is None else omega
    with _command():
        cascade = _read_system(system)
        gmm = load_forecast(forecast, cascade, T + L)
        inflow = {
            rid: expected_future_inflow(gmm, rid, T, L) for rid in cascade.ids
        }
        future = build_future_model(
            cascade, inflow, FutureModelConfig(L=L, omega=omega)
        )
        engine = PartitionEngine(
            future.milp, cascade.v_min, cascade.v_max, reservoir_ids=cascade.ids
        )
        rules = engine.run(
            RulesMeta(
                system=cascade.name,
                forecast_hash=stable_hash(gmm.model_dump(mode="json")),
                L=L,
                omega=omega,
                seed=seed,
            )
        )
        coverage = check_exhaustive(
            rules, seed=settings.seed if seed is None else seed
        )
        path = _out_dir(out) / "rules.json"
        save_rules(rules, path)
        if json_output:
            _emit_json(
                {
                    "rules": str(path),
                    "regions": len(rules.regions),
                    "pi": [r.pi for r in rules.regions],
                    "uncovered": coverage.uncovered,
                    "overlapping": coverage.overlapping,
                    "wall_time": engine.stats.wall_time,
                }
            )
            return
        table = Table(title=f"{len(rules.regions)} critical regions")
        table.add_column("region", justify="right")
        table.add_column("y*")
        for rid in cascade.ids:
            table.add_column(f"π {rid}", justify="right")
        for region in rules.regions:
            table.add_row(
                str(region.id),
                "".join(str(v) for v in region.y_star),
                *(f"{v:.4f}" for v in region.pi),
            )
        console.print(table)
        console.print(
            f"Wrote {path} in {engine.stats.wall_time:.1f}s "
            f"({coverage.uncovered} uncovered of {coverage.points} sampled points)."
        )


@app.command()
def plan(
    system: SystemOption,
    forecast: ForecastOption,
    rules: RulesOption,
    mode: Annotated[PlanMode, typer.Option("--mode")] = PlanMode.ccp,
    storage: Annotated[
        list[float] | None,
        typer.Option("--storage", help="Initial storage per reservoir, Mm3."),
    ] = None,
    out: OutOption = None,
    T: TOption = None,
    json_output: JsonOption = False,
) -> None:
    """Plan the current period and its carryover storage target."""
    T = settings.current_weeks if T is None else T
    with _command():
        cascade = _read_system(system)
        valuation = load_rules(rules)
        gmm = load_forecast(forecast, cascade)
        try:
            problem = PlanningProblem(
                system=cascade,
                T=T,
                initial_storage=storage or cascade.box_center().tolist(),
                rules=valuation,
                mode=mode,
                forecast=gmm,
            )
        except ValidationError as e:
            raise InputError(f"Invalid planning problem: {e}") from e
        result = solve_plan(problem)
        directory = _out_dir(out)
        write_plan_json(result, directory / "plan.json")
        write_schedule_csv(result.schedule, directory / "schedule.csv")
        if json_output:
            _emit_json(result.model_dump(mode="json"))
            return
        table = Table(title=f"Carryover storage target ({mode.value})")
        table.add_column("reservoir")
        table.add_column("target Mm3", justify="right")
        for rid, target in zip(cascade.ids, result.target, strict=True):
            table.add_row(rid, f"{target:.3f}")
        console.print(table)
        console.print(
            f"Immediate {result.immediate_benefit:.1f} MWh, future "
            f"{result.future_value:.1f} MWh, region {result.region_id}."
        )


@app.command()
def simulate(
    system: SystemOption,
    truth: Annotated[
        Path | None, typer.Option("--truth", help="Truth process JSON file.")
    ] = None,
    horizon: Annotated[int, typer.Option("--horizon", help="Weeks.")] = 52,
    mode: Annotated[PlanMode, typer.Option("--mode")] = PlanMode.ccp,
    out: OutOption = None,
    T: TOption = None,
    L: LOption = None,
    omega: OmegaOption = None,
    seed: SeedOption = None,
    json_output: JsonOption = False,
) -> None:
    """Rolling-horizon simulation of plan and replay cycles."""
    with _command():
        cascade = _read_system(system)
        overrides = {
            k: v
            for k, v in {"T": T, "L": L, "omega": omega, "seed": seed}.items()
            if v is not None
        }
        try:
            config = SimConfig(horizon=horizon, mode=mode, **overrides)
        except ValueError as e:
            raise UsageError(str(e)) from e
        if truth is None:
            raise UsageError("--truth is required; see the generate command.")
        try:
            process = TruthProcess.model_validate_json(truth.read_text())
        except OSError as e:
            raise InputError(f"Cannot read truth file {truth}: {e}") from e
        except ValueError as e:
            raise InputError(f"Invalid truth file {truth}: {e}") from e
        report = run_rolling(cascade, config, process)
        directory = _out_dir(out)
        report.write_json(directory / "simulation.json")
        report.write_csv(directory / "simulation.csv", cascade.ids)
        if json_output:
            _emit_json(report.model_dump(mode="json"))
            return
        table = Table(title=f"{len(report.cycles)} cycles, seed {config.seed}")
        for column in ("cycle", "planned MWh", "realized MWh", "future MWh"):
            table.add_column(column, justify="right")
        for c in report.cycles:
            table.add_row(
                str(c.cycle),
                f"{c.planned_benefit:.1f}",
                f"{c.realized_benefit:.1f}",
                f"{c.future_value:.1f}",
            )
        console.print(table)


def _parse_axes(axes: str) -> tuple[int, int]:
    try:
        i, j = (int(v) for v in axes.split(","))
    except ValueError as e:
        raise UsageError(f"--axes takes two indices like 0,1, got {axes}.") from e
    return i, j


@app.command()
def surface(
    rules: RulesOption,
    axes: Annotated[str, typer.Option("--axes", help="Two reservoir indices.")] = "0,1",
    grid: Annotated[int, typer.Option("--grid", help="Points per axis.")] = 21,
    out: OutOption = None,
    json_output: JsonOption = False,
) -> None:
    """Sample the future value over two reservoirs' storage into a CSV."""
    with _command():
        loaded = load_rules(rules)
        points = sample_surface(loaded, _parse_axes(axes), grid)
        path = _out_dir(out) / "surface.csv"
        export_surface_csv(
            [(p.theta, p.region_id, p.value) for p in points],
            path,
            loaded.meta.reservoir_ids or [str(k) for k in range(loaded.dim)],
        )
        if json_output:
            _emit_json([p.model_dump() for p in points])
        else:
            console.print(f"Wrote {len(points)} points to {path}.")


@app.command()
def gap(
    system: SystemOption,
    forecast: ForecastOption,
    samples: Annotated[int, typer.Option("--samples")] = 100,
    out: OutOption = None,
    T: TOption = None,
    L: LOption = None,
    omega: OmegaOption = None,
    seed: SeedOption = None,
    json_output: JsonOption = False,
) -> None:
    """Compare the aggregated future model with the weekly one."""
    T = settings.current_weeks if T is None else T
    L = settings.future_weeks if L is None else L
    with _command():
        cascade = _read_system(system)
        gmm = load_forecast(forecast, cascade, T + L)
        rng = np.random.default_rng(settings.seed if seed is None else seed)
        lo, hi = cascade.v_min, cascade.v_max
        thetas = [lo + rng.random(len(lo)) * (hi - lo) for _ in range(samples)]
        omega = settings.omega if omega is None else omega
        config = FutureModelConfig(L=L, omega=omega)
        report = aggregation_gap(cascade, gmm, L, thetas, config, start_week=T)
        report.write_csv(_out_dir(out) / "gap.csv", cascade.ids)
        summary = {
            "samples": len(report.samples),
            "skipped": report.skipped,
            "gap_min": report.gap_min,
            "gap_mean": report.gap_mean,
            "gap_max": report.gap_max,
        }
        if json_output:
            _emit_json(summary)
        else:
            console.print(
                f"Gap over {summary['samples']} samples: min {report.gap_min:.4f}%, "
                f"mean {report.gap_mean:.4f}%, max {report.gap_max:.4f}%."
            )


@app.command()
def quantile(
    p: Annotated[float, typer.Option("--p", help="Probability level.")],
    mu: Annotated[list[float], typer.Option("--mu", help="Component mean.")],
    var: Annotated[list[float], typer.Option("--var", help="Component variance.")],
    beta: Annotated[
        list[float] | None, typer.Option("--beta", help="Component weight.")
    ] = None,
    json_output: JsonOption = False,
) -> None:
    """Quantile of a scalar Gaussian mixture."""
    with _command():
        weights = beta or [1.0 / len(mu)] * len(mu)
        try:
            gmm = ScalarGmm(beta=weights, mu=mu, var=var)
        except ValueError as e:
            raise UsageError(str(e)) from e
        rho = gmm_quantile(gmm, p)
        if json_output:
            _emit_json({"p": p, "quantile": rho})
        else:
            console.print(f"{rho:.10g}")


@app.command()
def generate(
    kind: Annotated[CaseKind, typer.Option("--kind")] = CaseKind.two_reservoir,
    out: OutOption = None,
    T: TOption = None,
    L: LOption = None,
    seed: SeedOption = None,
) -> None:
    """Write a synthetic case: system, truth process and a first forecast."""
    T = settings.current_weeks if T is None else T
    L = settings.future_weeks if L is None else L
    with _command():
        case = generate_case(kind, seed)
        directory = _out_dir(out)
        dump_system(case.system, directory / "system.json")
        (directory / "truth.json").write_text(case.truth.model_dump_json(indent=2))
        forecast = case.truth.forecast(case.system, 0, T + L, T)
        dump_forecast(forecast, directory / "forecast.json")
        console.print(f"Wrote {kind.value} case to {directory}.")
