"""Per-pass comparison tables across finished runs."""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import structlog

from .errors import IncompleteTraceError
from .storage import read_jsonl
from .trainer import METRICS_FILE

logger = structlog.get_logger(__name__)

SERIES = ("mask_rate", "impurity", "test_error", "gamma")


@dataclass
class RunSeries:
    """Metrics stream of one run directory."""

    name: str
    header: dict[str, Any]
    passes: list[dict[str, Any]]
    failed: bool = False

    @property
    def config_hash(self) -> str:
        return self.header.get("config_hash", "")


def load_run(directory: str | Path, name: Optional[str] = None) -> RunSeries:
    """
    Read a run's metrics stream.

    Raises:
        VersionMismatchError: If the stream is missing its header or has another version
        IncompleteTraceError: If the run wrote no pass records
    """
    path = Path(directory)
    header, records = read_jsonl(path / METRICS_FILE, stream="metrics")
    passes = [r for r in records if r["kind"] == "pass"]
    failed = any(r["kind"] == "error" for r in records)
    if not passes:
        raise IncompleteTraceError(f"{path}: no pass records")
    return RunSeries(name=name or path.name, header=header, passes=passes, failed=failed)


def _unique_names(runs: list[RunSeries]) -> list[str]:
    seen: dict[str, int] = {}
    names = []
    for run in runs:
        count = seen.get(run.name, 0)
        seen[run.name] = count + 1
        names.append(run.name if count == 0 else f"{run.name}.{count}")
    return names


def compatibility_notes(runs: list[RunSeries]) -> list[str]:
    """Warnings about runs that cannot be aligned by more than pass index."""
    notes = []
    hashes = {r.config_hash for r in runs}
    if len(hashes) > 1:
        notes.append(
            "config hashes differ ("
            + ", ".join(f"{r.name}={r.config_hash[:12]}" for r in runs)
            + "); series are aligned by pass index only"
        )
    lengths = {len(r.passes) for r in runs}
    if len(lengths) > 1:
        notes.append(
            f"runs differ in length; rows truncated to the shortest ({min(lengths)} passes)"
        )
    for r in runs:
        if r.failed:
            notes.append(f"{r.name} ended with an error record")
    return notes


def _cell(value: Any) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_report(runs: list[RunSeries], output_dir: str | Path) -> tuple[list[Path], list[str]]:
    """
    Write one CSV per series plus the per-class threshold history.

    Each series CSV has a ``pass_index`` column and one column per run. ``thresholds.csv``
    has one column per (run, class). Rows stop at the shortest run.

    Returns:
        The written paths and the compatibility notes (also logged as warnings)
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = _unique_names(runs)
    rows = min(len(r.passes) for r in runs)
    notes = compatibility_notes(runs)
    for note in notes:
        logger.warning("report_note", note=note)

    written = []
    for series in SERIES:
        path = out / f"{series}.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["pass_index", *names])
            for i in range(rows):
                values = [_cell(r.passes[i].get(series)) for r in runs]
                writer.writerow([runs[0].passes[i]["pass_index"], *values])
        written.append(path)

    path = out / "thresholds.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        columns = []
        for name, r in zip(names, runs):
            classes = len(r.passes[0]["per_class_thresholds"])
            columns += [f"{name}:class_{c}" for c in range(classes)]
        writer.writerow(["pass_index", *columns])
        for i in range(rows):
            values = []
            for r in runs:
                values += [_cell(v) for v in r.passes[i]["per_class_thresholds"]]
            writer.writerow([runs[0].passes[i]["pass_index"], *values])
    written.append(path)

    if notes:
        notes_path = out / "notes.txt"
        notes_path.write_text("\n".join(notes) + "\n", encoding="utf-8")
        written.append(notes_path)
    return written, notes
