"""Ablation grids over gate modes, AUM smoothing and fixed gate values."""

import csv
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import structlog

from .config import RunConfig, build_config
from .errors import InvalidConfigError, MarginMatchError
from .log import configure_logging

logger = structlog.get_logger(__name__)

ABLATION_KINDS = ("thresholds", "delta", "grid")
GATE_MODES = ("fixed", "flexible")
DELTA_GRID = (0.95, 0.99, 0.995, 0.997, 0.999, 1.0)
TAU_GRID = (0.65, 0.75, 0.85, 0.95)
GAMMA_GRID = (-2.5, -1.75, -1.25, -0.75, -0.25)


@dataclass(frozen=True)
class AblationCell:
    """One grid cell: a label for the table plus the overrides it applies to the base config."""

    key: tuple[tuple[str, Any], ...]
    overrides: tuple[str, ...]

    @property
    def name(self) -> str:
        return "_".join(f"{k}-{v}" for k, v in self.key)

    def value(self, name: str) -> Any:
        return dict(self.key)[name]


@dataclass
class CellResult:
    cell: AblationCell
    seed: int
    test_error: Optional[float] = None
    impurity: Optional[float] = None
    mask_rate: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class AblationReport:
    kind: str
    cells: list[AblationCell]
    results: list[CellResult] = field(default_factory=list)

    def for_cell(self, cell: AblationCell) -> list[CellResult]:
        return [r for r in self.results if r.cell == cell]

    def median(self, cell: AblationCell, metric: str = "test_error") -> Optional[float]:
        """Median over the seeds that completed; None if none did."""
        values = [getattr(r, metric) for r in self.for_cell(cell) if r.ok]
        values = [v for v in values if v is not None]
        return statistics.median(values) if values else None

    def partial(self, cell: AblationCell) -> bool:
        return any(not r.ok for r in self.for_cell(cell))

    @property
    def failed(self) -> list[CellResult]:
        return [r for r in self.results if not r.ok]


def threshold_cells() -> list[AblationCell]:
    """Fixed or flexible confidence gate crossed with a fixed or flexible AUM gate, MarginMatch."""
    return [
        AblationCell(
            key=(("confidence", conf), ("aum", aum)),
            overrides=(
                "policy=marginmatch",
                f"gating.confidence_gate={conf}",
                f"gating.aum_gate={aum}",
            ),
        )
        for conf in GATE_MODES
        for aum in GATE_MODES
    ]


def delta_cells(deltas: Sequence[float] = DELTA_GRID) -> list[AblationCell]:
    return [AblationCell(key=(("delta", d),), overrides=(f"delta={d}",)) for d in deltas]


def grid_cells(
    taus: Sequence[float] = TAU_GRID, gammas: Sequence[float] = GAMMA_GRID
) -> list[AblationCell]:
    """Fixed confidence threshold tau crossed with fixed AUM cutoff gamma, MarginMatch."""
    return [
        AblationCell(
            key=(("tau", tau), ("gamma", gamma)),
            overrides=(
                "policy=marginmatch",
                "gating.confidence_gate=fixed",
                "gating.aum_gate=fixed",
                f"tau={tau}",
                f"gating.fixed_gamma={gamma}",
            ),
        )
        for tau in taus
        for gamma in gammas
    ]


def cells_for(
    kind: str,
    values: Optional[Sequence[float]] = None,
    gammas: Optional[Sequence[float]] = None,
) -> list[AblationCell]:
    """
    Build the cells of an ablation.

    Args:
        kind: thresholds, delta or grid
        values: Replacement delta values (delta) or tau values (grid)
        gammas: Replacement gamma values (grid)
    """
    if kind == "thresholds":
        return threshold_cells()
    if kind == "delta":
        return delta_cells(values or DELTA_GRID)
    if kind == "grid":
        return grid_cells(values or TAU_GRID, gammas or GAMMA_GRID)
    raise InvalidConfigError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")


def cell_config(base: RunConfig, cell: AblationCell, seed: int, output_root: Path) -> RunConfig:
    """The base config with a cell's overrides, a seed and a private output directory."""
    directory = output_root / "runs" / cell.name / f"seed-{seed}"
    overrides = [*cell.overrides, f"seed={seed}", f"outputs.directory={directory}"]
    return build_config(base.model_dump(mode="json"), overrides)


def _run_job(job: tuple[AblationCell, int, dict]) -> CellResult:
    from .trainer import run

    cell, seed, config_data = job
    config = RunConfig.model_validate(config_data)
    try:
        artifacts = run(config, output_dir=Path(config.outputs.directory))
    except MarginMatchError as e:
        logger.warning("ablation_cell_failed", cell=cell.name, seed=seed, error=str(e))
        return CellResult(cell=cell, seed=seed, error=f"{type(e).__name__}: {e}")
    final = artifacts.metrics[-1]
    return CellResult(
        cell=cell,
        seed=seed,
        test_error=final.test_error,
        impurity=final.impurity,
        mask_rate=final.mask_rate,
    )


def run_ablation(
    kind: str,
    base: RunConfig,
    seeds: Sequence[int],
    output_root: str | Path,
    values: Optional[Sequence[float]] = None,
    gammas: Optional[Sequence[float]] = None,
    workers: int = 1,
    log_level: str = "warning",
) -> AblationReport:
    """
    Run every cell of an ablation once per seed; every cell shares the same seeds.

    Cells that raise are recorded as failed rather than aborting the grid.
    """
    if not seeds:
        raise InvalidConfigError("at least one seed is required")
    root = Path(output_root)
    cells = cells_for(kind, values, gammas)
    jobs = [
        (cell, seed, cell_config(base, cell, seed, root).model_dump(mode="json"))
        for cell in cells
        for seed in seeds
    ]
    logger.info("ablation_started", kind=kind, cells=len(cells), seeds=len(seeds), workers=workers)
    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=configure_logging, initargs=(log_level,)
        ) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(job) for job in jobs]
    report = AblationReport(kind=kind, cells=cells, results=results)
    logger.info("ablation_completed", kind=kind, failed=len(report.failed))
    return report


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_summary(report: AblationReport, path: str | Path) -> Path:
    """
    Write the median final test error per cell in the table shape of the ablation kind.

    thresholds: one row per confidence gate mode, one column per AUM gate mode.
    delta: one row per delta value.
    grid: one row per tau, one column per gamma.
    A ``partial`` column marks rows where some seed failed.
    """
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if report.kind == "delta":
            writer.writerow(
                [
                    "delta",
                    "median_test_error",
                    "median_impurity",
                    "median_mask_rate",
                    "seeds_ok",
                    "partial",
                ]
            )
            for cell in report.cells:
                ok = sum(r.ok for r in report.for_cell(cell))
                writer.writerow(
                    [
                        cell.value("delta"),
                        _fmt(report.median(cell)),
                        _fmt(report.median(cell, "impurity")),
                        _fmt(report.median(cell, "mask_rate")),
                        ok,
                        str(report.partial(cell)).lower(),
                    ]
                )
            return path

        if report.kind == "thresholds":
            row_key, col_key, col_prefix = "confidence", "aum", "aum_"
        else:
            row_key, col_key, col_prefix = "tau", "gamma", "gamma_"
        rows: dict[Any, dict[Any, AblationCell]] = {}
        for cell in report.cells:
            rows.setdefault(cell.value(row_key), {})[cell.value(col_key)] = cell
        columns = list(dict.fromkeys(c.value(col_key) for c in report.cells))
        label = "confidence_threshold" if report.kind == "thresholds" else "tau"
        writer.writerow([label, *(f"{col_prefix}{c}" for c in columns), "partial"])
        for row_value, by_col in rows.items():
            writer.writerow(
                [
                    row_value,
                    *(_fmt(report.median(by_col[c])) for c in columns),
                    str(any(report.partial(by_col[c]) for c in columns)).lower(),
                ]
            )
    return path


def write_per_seed(report: AblationReport, path: str | Path) -> Path:
    """Long-form CSV: one row per (cell, seed) with its final metrics or error."""
    path = Path(path)
    keys = list(dict.fromkeys(k for cell in report.cells for k, _ in cell.key))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([*keys, "seed", "status", "test_error", "impurity", "mask_rate", "error"])
        for r in report.results:
            values = dict(r.cell.key)
            writer.writerow(
                [
                    *(values.get(k, "") for k in keys),
                    r.seed,
                    "ok" if r.ok else "failed",
                    _fmt(r.test_error),
                    _fmt(r.impurity),
                    _fmt(r.mask_rate),
                    r.error or "",
                ]
            )
    return path
