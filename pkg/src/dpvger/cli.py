import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from dpvger.checkpoint import load_gan_pair, read_header
from dpvger.config import ExperimentConfig, MethodKind, parse_config_lines
from dpvger.env import ConfigurationError
from dpvger.errors import CheckpointError, DataError, DpVgerError, PrivacyError
from dpvger.execution import (
    EXIT_CODES,
    ExecutionOptions,
    ProgressEvent,
    ProgressEventType,
    RunStatus,
    classify_run_error,
)
from dpvger.gan import generate
from dpvger.harness import run as run_experiment
from dpvger.logger import setup_logger
from dpvger.metrics import compare_runs
from dpvger.privacy import (
    ACCOUNTING_DISCLOSURE,
    DEFAULT_ORDERS,
    LedgerEntry,
    calibrate_sigma,
    compose,
    to_delta,
    to_eps_delta,
)
from dpvger.rng import RngState

cli_app = typer.Typer(
    name="dpvger",
    help="dp-vger: differentially private generative replay for continual learning",
    add_completion=False,
)
console = Console()


def load_run_config(
    config: Optional[Path], overrides: Dict[str, Any]
) -> ExperimentConfig:
    """Config file (if any) with command-line overrides applied on top."""
    if config is not None:
        try:
            text = config.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigurationError(f"Error loading config from {config}: {e}") from e
        data = parse_config_lines(text, source=str(config))
    else:
        data = parse_config_lines("", source="<cli>")
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "data_dir":
            data["tasks"][key] = value
        else:
            data[key] = value
    try:
        return ExperimentConfig.from_dict(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid config: {e}") from e


def _print_progress(event: ProgressEvent) -> None:
    if event.type is ProgressEventType.TASK_EVALUATED and event.value is not None:
        console.print(
            f"[cyan]task {event.task_id}[/cyan] mean accuracy {event.value:.4f}"
        )
    elif event.type is ProgressEventType.GAN_COMPLETED:
        suffix = f" epsilon={event.value:.4f}" if event.value is not None else ""
        console.print(f"  GAN task {event.task_id} class {event.label} done{suffix}")


def _fail(e: BaseException) -> typer.Exit:
    status, code = classify_run_error(e)
    console.print(f"[red]Error ({code}): {e}[/red]")
    return typer.Exit(EXIT_CODES[status])


@cli_app.command()
def run(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Path to a key = value experiment config"
    ),
    method: Optional[MethodKind] = typer.Option(
        None, "--method", "-m", help="Continual learning method"
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Root seed"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    data_dir: Optional[Path] = typer.Option(
        None, "--data-dir", help="Directory with the MNIST IDX files"
    ),
    workers: Optional[int] = typer.Option(
        None, "--workers", "-w", help="Concurrent per-class GAN trainings"
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose logging"),
) -> None:
    if config is not None and not config.exists():
        console.print(f"[red]Error: Config file {config} does not exist[/red]")
        raise typer.Exit(1)
    if verbose:
        setup_logger("dpvger", logging.INFO)

    try:
        experiment = load_run_config(
            config,
            {
                "method": method.value if method is not None else None,
                "seed": seed,
                "out_dir": str(out) if out is not None else None,
                "data_dir": str(data_dir) if data_dir is not None else None,
                "max_gan_workers": workers,
            },
        )
    except ConfigurationError as e:
        console.print(f"[red]Error: {e}[/red]")
        raise typer.Exit(1)

    options = ExecutionOptions(
        max_gan_workers=experiment.max_gan_workers, on_progress=_print_progress
    )
    console.print(
        f"[green]Running {experiment.method.value} (seed {experiment.seed}) "
        f"into {experiment.out_dir}[/green]"
    )
    try:
        result = run_experiment(experiment, options)
    except Exception as e:
        if verbose:
            console.print_exception()
        raise _fail(e)

    table = Table(title=f"{experiment.method.value} seed {experiment.seed}")
    table.add_column("Trained task", style="cyan")
    table.add_column("Mean accuracy", style="green")
    table.add_column("Per task", style="yellow")
    for i, row in enumerate(result.matrix.rows):
        table.add_row(
            str(i),
            f"{result.matrix.mean(i):.4f}",
            " ".join(f"{value:.3f}" for value in row),
        )
    console.print(table)
    console.print(f"[green]Artifacts written to {result.out_dir}[/green]")


@cli_app.command()
def accountant(
    q: float = typer.Option(..., "--q", help="Sampling fraction in (0, 1]"),
    steps: int = typer.Option(..., "--steps", help="Number of mechanism calls"),
    delta: float = typer.Option(1e-8, "--delta", help="Target delta"),
    sigma: Optional[float] = typer.Option(
        None, "--sigma", help="Noise multiplier (prints epsilon)"
    ),
    target_eps: Optional[float] = typer.Option(
        None, "--target-eps", help="Calibrate sigma to this epsilon"
    ),
    eps: Optional[float] = typer.Option(
        None, "--eps", help="Print delta for this epsilon instead"
    ),
) -> None:
    if (sigma is None) == (target_eps is None):
        console.print("[red]Error: provide exactly one of --sigma or --target-eps[/red]")
        raise typer.Exit(1)
    try:
        if sigma is None:
            calibrated = calibrate_sigma(target_eps or 0.0, delta, q, steps)
            console.print(f"sigma = {calibrated!r}")
            return
        curve = compose([LedgerEntry(q=q, sigma=sigma, steps=steps)], DEFAULT_ORDERS)
        if eps is not None:
            value, order = to_delta(curve, eps)
            console.print(f"delta = {value!r} (order {order})")
        else:
            value, order = to_eps_delta(curve, delta)
            console.print(f"epsilon = {value!r} (order {order})")
        console.print(f"[dim]# {ACCOUNTING_DISCLOSURE}[/dim]")
    except PrivacyError as e:
        raise _fail(e)


def write_pgm(path: Path, pixels: Any) -> None:
    """Binary greyscale PGM of a square image with values in [0, 1]."""
    side = math.isqrt(pixels.shape[0])
    if side * side != pixels.shape[0]:
        raise DataError(f"cannot write a non-square image of width {pixels.shape[0]}")
    values = bytes(int(round(float(p) * 255.0)) for p in pixels)
    path.write_bytes(f"P5\n{side} {side}\n255\n".encode("ascii") + values)


@cli_app.command()
def sample(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="GAN checkpoint file"),
    out: Path = typer.Option(..., "--out", "-o", help="Directory for PGM images"),
    count: int = typer.Option(16, "--count", "-n", help="Images to generate"),
    seed: int = typer.Option(0, "--seed", help="Sampling seed"),
) -> None:
    if not checkpoint.exists():
        console.print(f"[red]Error: Checkpoint {checkpoint} does not exist[/red]")
        raise typer.Exit(1)
    try:
        pair, _ = load_gan_pair(checkpoint)
        images = generate(pair.generator, count, RngState(seed))
        out.mkdir(parents=True, exist_ok=True)
        for index, image in enumerate(images):
            write_pgm(out / f"t{pair.task_id}_c{pair.label}_{index:04d}.pgm", image)
    except DpVgerError as e:
        raise _fail(e)
    console.print(f"[green]Wrote {count} images of digit {pair.label} to {out}[/green]")


@cli_app.command()
def inspect(
    checkpoint: Path = typer.Argument(..., help="Checkpoint file"),
) -> None:
    try:
        header = read_header(checkpoint)
    except CheckpointError as e:
        raise _fail(e)
    console.print(f"kind = {header.kind.value}")
    console.print(f"version = {header.version}")
    for key, value in sorted(header.meta.items()):
        console.print(f"{key} = {value}")
    table = Table(title=str(checkpoint))
    table.add_column("Array", style="cyan")
    table.add_column("Shape", style="green")
    for array in header.arrays:
        table.add_row(array.name, "x".join(str(dim) for dim in array.shape))
    console.print(table)


@cli_app.command()
def schema(
    output: Optional[Path] = typer.Option(
        None, "--output", "-o", help="Write the schema here instead of stdout"
    ),
) -> None:
    """Print the JSON Schema of the experiment config."""
    text = json.dumps(ExperimentConfig.model_json_schema(), indent=2)
    if output is None:
        console.print_json(text)
        return
    output.write_text(text + "\n", encoding="utf-8")
    console.print(f"[green]Wrote config schema to {output}[/green]")


@cli_app.command()
def compare(
    run_dirs: List[Path] = typer.Argument(..., help="Run output directories"),
    output: Optional[Path] = typer.Option(
        None, "--output", "-o", help="Also write the table as CSV"
    ),
) -> None:
    try:
        rows = compare_runs(run_dirs)
    except DpVgerError as e:
        raise _fail(e)
    if not rows:
        console.print("[yellow]No completed runs found[/yellow]")
        raise typer.Exit(2)
    table = Table(title="Final mean accuracy")
    table.add_column("Method", style="cyan")
    table.add_column("Runs", style="yellow")
    table.add_column("Mean", style="green")
    table.add_column("Std", style="blue")
    for row in rows:
        table.add_row(
            row.method,
            str(row.runs),
            f"{row.mean_final_accuracy:.4f}",
            f"{row.std_final_accuracy:.4f}",
        )
    console.print(table)
    if output is not None:
        with open(output, "w", newline="", encoding="utf-8") as csvfile:
            writer = csv.writer(csvfile, lineterminator="\n")
            writer.writerow(["method", "runs", "seeds", "mean_accuracy", "std_accuracy"])
            for row in rows:
                writer.writerow(
                    [
                        row.method,
                        row.runs,
                        " ".join(str(s) for s in row.seeds),
                        repr(row.mean_final_accuracy),
                        repr(row.std_final_accuracy),
                    ]
                )
        console.print(f"[green]Wrote comparison to {output}[/green]")


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point mapping usage errors to exit code 1."""
    command = typer.main.get_command(cli_app)
    try:
        result = command.main(args=argv, prog_name="dpvger", standalone_mode=False)
    except click.exceptions.ClickException as e:
        e.show()
        return EXIT_CODES[RunStatus.CONFIG_ERROR]
    except click.exceptions.Abort:
        return EXIT_CODES[RunStatus.FAILED]
    return result if isinstance(result, int) else 0


app = cli_app

if __name__ == "__main__":
    sys.exit(main())
