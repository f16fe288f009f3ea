"""
Command-line interface for the calipred package.

Each subcommand runs one pipeline stage against an artifact directory and
prints a one-line JSON summary to stdout. Human-oriented output (panels,
tables, logs) goes to stderr.

Exit codes: 0 on success, 1 on validation errors (bad config, bad data,
missing artifacts, usage errors), 2 on runtime failures.
"""

import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

# Recent typer releases ship their own copy of click.
try:
    from typer._click.exceptions import Abort, UsageError
except ImportError:
    from click.exceptions import Abort, UsageError  # type: ignore[no-redef]

from . import __version__
from .config import PipelineConfig, load_config
from .errors import (
    ArtifactError,
    ConfigError,
    ContractError,
    CoverageError,
    DataError,
    InfeasibleError,
    SceneError,
)
from .integration import CalipredPipeline
from .simulator import COLLISION_CLASSES, StatisticsReport

app = typer.Typer(
    name="calipred",
    help="Calibrated set-valued trajectory prediction for highway planning",
    add_completion=False,
    rich_markup_mode="rich",
)
console = Console(stderr=True)

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

VALIDATION_ERRORS = (
    ArtifactError,
    ConfigError,
    ContractError,
    CoverageError,
    DataError,
    InfeasibleError,
    SceneError,
    FileNotFoundError,
)


def _config_option() -> Any:
    return typer.Option(
        None,
        "--config",
        "-c",
        help="Pipeline config JSON (defaults when omitted)",
        dir_okay=False,
    )


def _seed_option() -> Any:
    return typer.Option(None, "--seed", "-s", help="Override the master seed")


def _out_option() -> Any:
    return typer.Option(
        Path("artifacts"), "--out", "-o", help="Artifact directory", file_okay=False
    )


def _verbose_option() -> Any:
    return typer.Option(False, "--verbose", "-v", help="Show configuration and debug logs")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def _jsonable(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"Cannot serialise {type(value).__name__}")


def _show_config(stage: str, config: PipelineConfig, out: Path) -> None:
    console.print(
        Panel(
            f"Stage: [cyan]{stage}[/cyan]\n"
            f"Seed: [yellow]{config.seed}[/yellow]\n"
            f"Output: [green]{out}[/green]\n"
            f"Fingerprint: [magenta]{config.fingerprint(stage)[:16]}[/magenta]",
            title="[bold]calipred[/bold]",
        )
    )


def _execute(
    stage: str,
    config_path: Optional[Path],
    seed: Optional[int],
    out: Path,
    verbose: bool,
    action: Callable[[CalipredPipeline], Dict[str, Any]],
    adjust: Optional[Callable[[PipelineConfig], PipelineConfig]] = None,
) -> Dict[str, Any]:
    """Load the config, run one stage and print its summary line."""
    _setup_logging(verbose)
    try:
        config = load_config(config_path, seed)
        if adjust is not None:
            config = adjust(config)
        if verbose:
            _show_config(stage, config, out)
        summary = action(CalipredPipeline(config, out))
    except VALIDATION_ERRORS as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(EXIT_VALIDATION)
    except Exception as e:
        console.print(f"[red]Error during {stage}:[/red] {e}")
        raise typer.Exit(EXIT_RUNTIME)
    typer.echo(json.dumps(summary, separators=(",", ":"), default=_jsonable))
    return summary


@app.command()
def sparsify(
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Path = _out_option(),
    verbose: bool = _verbose_option(),
) -> None:
    """
    Build the epsilon-covering trajectory basis.

    Examples:
        $ calipred sparsify --out runs/a
        $ calipred sparsify --config pipeline.json --seed 3
    """
    _execute("sparsify", config, seed, out, verbose, CalipredPipeline.sparsify)


@app.command()
def label(
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Path = _out_option(),
    verbose: bool = _verbose_option(),
) -> None:
    """Label the train, calibration and held-out splits against the basis."""
    _execute("label", config, seed, out, verbose, CalipredPipeline.label)


@app.command()
def train(
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Path = _out_option(),
    verbose: bool = _verbose_option(),
) -> None:
    """Fit the scorer network on the training split."""
    _execute("train", config, seed, out, verbose, CalipredPipeline.train)


def _calibration_override(
    method: Optional[str], confidence: Optional[float], epsilon: Optional[float]
) -> Callable[[PipelineConfig], PipelineConfig]:
    def adjust(config: PipelineConfig) -> PipelineConfig:
        changes = {
            key: value
            for key, value in (
                ("method", method),
                ("confidence", confidence),
                ("epsilon", epsilon),
            )
            if value is not None
        }
        if not changes:
            return config
        block = dataclasses.replace(config.calibration, **changes)
        return dataclasses.replace(config, calibration=block)

    return adjust


@app.command()
def calibrate(
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Path = _out_option(),
    verbose: bool = _verbose_option(),
    method: Optional[str] = typer.Option(
        None,
        "--method",
        "-m",
        help="post_bloat or conformal (overrides the config)",
        case_sensitive=False,
    ),
    confidence: Optional[float] = typer.Option(
        None, "--confidence", help="Confidence of the post-bloating bound"
    ),
    epsilon: Optional[float] = typer.Option(
        None, "--epsilon", help="Target miscoverage of conformal calibration"
    ),
) -> None:
    """
    Calibrate the trained scorer.

    Overrides become part of the config, so later stages must be given the
    same values.

    Examples:
        $ calipred calibrate --method post_bloat --confidence 0.99
        $ calipred calibrate --method conformal --epsilon 0.1
    """
    _execute(
        "calibrate",
        config,
        seed,
        out,
        verbose,
        CalipredPipeline.calibrate,
        _calibration_override(method.lower() if method else None, confidence, epsilon),
    )


@app.command()
def evaluate(
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Path = _out_option(),
    verbose: bool = _verbose_option(),
) -> None:
    """Measure the held-out false-negative rate of the calibrated predictor."""
    _execute("evaluate", config, seed, out, verbose, CalipredPipeline.evaluate)


@app.command()
def simulate(
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Path = _out_option(),
    verbose: bool = _verbose_option(),
) -> None:
    """
    Run closed-loop highway trials.

    Set CALIPRED_WORKERS to run trials in parallel processes.
    """
    _execute("simulate", config, seed, out, verbose, CalipredPipeline.simulate)


def _statistics_table(report: StatisticsReport) -> Table:
    table = Table(title="Collisions involving the controlled vehicle")
    table.add_column("n_uncontrolled", justify="right")
    table.add_column("trials", justify="right")
    for kind in COLLISION_CLASSES:
        table.add_column(kind, justify="right")
    for n, counts in sorted(report.by_n_uncontrolled.items()):
        table.add_row(
            str(n), str(counts["trials"]), *(str(counts[k]) for k in COLLISION_CLASSES)
        )
    table.add_row(
        "all",
        str(report.n_trials),
        *(str(report.counts[k]) for k in COLLISION_CLASSES),
        style="bold",
    )
    return table


@app.command()
def report(
    config: Optional[Path] = _config_option(),
    seed: Optional[int] = _seed_option(),
    out: Path = _out_option(),
    verbose: bool = _verbose_option(),
) -> None:
    """Aggregate simulation outcomes into collision statistics."""

    def action(pipeline: CalipredPipeline) -> Dict[str, Any]:
        statistics = pipeline.report()
        console.print(_statistics_table(statistics))
        return {
            "stage": "report",
            "trials": statistics.n_trials,
            "counts": statistics.counts,
            "traps": statistics.traps,
            "incomplete": statistics.incomplete,
        }

    _execute("report", config, seed, out, verbose, action)


def _version_callback(value: bool) -> None:
    if value:
        typer.echo(f"calipred {__version__}")
        raise typer.Exit()


@app.callback()
def callback(
    version: bool = typer.Option(
        None,
        "--version",
        "-V",
        help="Show version and exit",
        callback=_version_callback,
        is_eager=True,
    ),
) -> None:
    """
    calipred - calibrated trajectory prediction and planning.

    Stages, in order:

    • [bold]sparsify[/bold] - build the trajectory basis
    • [bold]label[/bold] - label train / calibration / held-out splits
    • [bold]train[/bold] - fit the scorer
    • [bold]calibrate[/bold] - post-bloat or conformally calibrate it
    • [bold]evaluate[/bold] - held-out false-negative rate
    • [bold]simulate[/bold] - closed-loop trials
    • [bold]report[/bold] - collision statistics

    Examples:
        $ calipred sparsify --out runs/a
        $ calipred calibrate --out runs/a --method conformal
    """


def run(argv: Optional[List[str]] = None) -> int:
    """Run the CLI without exiting the interpreter; returns the exit status."""
    args = sys.argv[1:] if argv is None else list(argv)
    try:
        result = app(args=args, prog_name="calipred", standalone_mode=False)
    except UsageError as e:
        if e.ctx is not None:
            typer.echo(e.ctx.get_usage(), err=True)
        typer.echo(f"Error: {e.format_message()}", err=True)
        return EXIT_VALIDATION
    except Abort:
        return EXIT_RUNTIME
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
