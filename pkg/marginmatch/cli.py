"""Command-line interface: train, replay, ablate and report."""

import sys
from pathlib import Path
from typing import Optional

import click

from . import __version__
from .ablation import ABLATION_KINDS, run_ablation, write_per_seed, write_summary
from .config import RunConfig, load_config
from .errors import MarginMatchError
from .log import configure_logging
from .replay import replay as replay_trace
from .report import load_run, write_report
from .storage import JsonlWriter, read_trace
from .trainer import CONFIG_FILE, run

LOG_LEVELS = ("debug", "info", "warning", "error")


def _load(
    config_path: Optional[str], overrides: tuple[str, ...], output_dir: Optional[str]
) -> RunConfig:
    extra = list(overrides)
    if output_dir:
        extra.append(f"outputs.directory={output_dir}")
    return load_config(config_path, extra)


def _parse_floats(text: Optional[str]) -> Optional[list[float]]:
    if not text:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from None


def _fail(e: Exception) -> None:
    click.echo(f"Error: {e}", err=True)
    sys.exit(1)


config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML config file"
)
set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a config key (dotted path)",
)


@click.group()
@click.version_option(__version__)
@click.option(
    "--log-level",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
    default="info",
    help="Minimum log level (logs go to stderr)",
)
def main(log_level):
    """MarginMatch - semi-supervised pseudo-label selection experiments"""
    configure_logging(log_level)


@main.command()
@config_option
@set_option
@click.option("--output-dir", help="Output directory (overrides outputs.directory)")
def train(config_path, overrides, output_dir):
    """Train one configured run and write its artifacts."""
    try:
        config = _load(config_path, overrides, output_dir)
    except (MarginMatchError, OSError) as e:
        _fail(e)

    try:
        artifacts = run(config)
    except (MarginMatchError, OSError) as e:
        _fail(e)

    final = artifacts.metrics[-1]
    click.echo("\nRun complete:")
    click.echo(f"  Policy:      {config.policy.value}")
    click.echo(f"  Passes:      {len(artifacts.metrics)}")
    click.echo(f"  Test error:  {final.test_error:.4f}")
    click.echo(f"  Mask rate:   {final.mask_rate:.4f}")
    impurity = "n/a" if final.impurity is None else f"{final.impurity:.4f}"
    click.echo(f"  Impurity:    {impurity}")
    click.echo(f"  Config hash: {artifacts.config_hash}")
    click.echo(f"  Output:      {artifacts.output_dir}")


@main.command()
@click.argument("trace_path", type=click.Path(exists=True, dir_okay=False))
@config_option
@set_option
@click.option("--output-dir", required=True, help="Directory for the replayed logs")
def replay(trace_path, config_path, overrides, output_dir):
    """
    Replay a recorded trace through the selection engine.

    Without --config, the config.yaml next to the trace is used when present.
    """
    sibling = Path(trace_path).parent / CONFIG_FILE
    if config_path is None and sibling.exists():
        config_path = str(sibling)
    try:
        config = load_config(config_path, list(overrides))
        trace = read_trace(trace_path)
        result = replay_trace(trace, config)

        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        provenance = {
            "config_hash": trace.header.config_hash,
            "seed": config.seed,
            "policy": config.policy.value,
        }
        with JsonlWriter(out / "decisions.jsonl", "decisions", **provenance, interval=1) as w:
            for payload in result.decision_log():
                w.write("decision", payload)
        with JsonlWriter(out / "thresholds.jsonl", "thresholds", **provenance) as w:
            for state in result.thresholds:
                w.write("thresholds", state.model_dump(mode="json"))
        with JsonlWriter(out / "trackers.jsonl", "trackers", **provenance) as w:
            for tracker in result.trackers():
                w.write("tracker", tracker.model_dump(mode="json"))
    except (MarginMatchError, OSError) as e:
        _fail(e)

    selected = sum(int(d.selected.sum()) for d in result.decisions)
    click.echo("\nReplay complete:")
    click.echo(f"  Passes:      {trace.header.pass_count}")
    click.echo(f"  Examples:    {trace.header.example_count}")
    click.echo(f"  Selected:    {selected}")
    click.echo(f"  Output:      {out}")


@main.command()
@click.argument("kind", type=click.Choice(ABLATION_KINDS, case_sensitive=False))
@config_option
@set_option
@click.option("--output-dir", required=True, help="Directory for the tables and per-cell runs")
@click.option(
    "--seeds", default=5, show_default=True, type=click.IntRange(min=1), help="Seeds per cell"
)
@click.option("--values", help="Comma-separated delta values (delta) or tau values (grid)")
@click.option("--gammas", help="Comma-separated gamma values (grid)")
@click.option(
    "--workers", default=1, show_default=True, type=click.IntRange(min=1), help="Parallel cells"
)
def ablate(kind, config_path, overrides, output_dir, seeds, values, gammas, workers):
    """Run an ablation grid and write its tables."""
    try:
        base = load_config(config_path, list(overrides))
        seed_list = [base.seed + i for i in range(seeds)]
        report = run_ablation(
            kind.lower(),
            base,
            seed_list,
            output_dir,
            values=_parse_floats(values),
            gammas=_parse_floats(gammas),
            workers=workers,
        )
        out = Path(output_dir)
        summary = write_summary(report, out / f"{kind.lower()}.csv")
        per_seed = write_per_seed(report, out / f"{kind.lower()}_per_seed.csv")
    except (MarginMatchError, OSError) as e:
        _fail(e)

    click.echo(f"\nAblation '{kind.lower()}' complete:")
    click.echo(f"  Cells:       {len(report.cells)}")
    click.echo(f"  Seeds:       {', '.join(str(s) for s in seed_list)}")
    click.echo(f"  Summary:     {summary}")
    click.echo(f"  Per seed:    {per_seed}")
    if report.failed:
        for r in report.failed:
            click.echo(f"Error: cell {r.cell.name} seed {r.seed} failed: {r.error}", err=True)
        click.echo("The summary table is partial.", err=True)
        sys.exit(1)


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--output-dir", required=True, help="Directory for the comparison CSVs")
def report(run_dirs, output_dir):
    """Align per-pass metrics of one or more runs into CSV tables."""
    try:
        runs = [load_run(d) for d in run_dirs]
        written, notes = write_report(runs, output_dir)
    except (MarginMatchError, OSError) as e:
        _fail(e)

    for note in notes:
        click.echo(f"Warning: {note}", err=True)
    click.echo("\nReport written:")
    for path in written:
        click.echo(f"  {path}")


if __name__ == "__main__":
    main()
