"""Hyper-parameter sweeps over Cartesian grids of config values.

A sweep expands axis definitions into the full grid, runs each point in
its own subdirectory, and records one RunRecord per point.  Diverged or
failed runs are recorded, never fatal; a crash-safe journal lets an
interrupted sweep restart without redoing finished points.  The special
axis value ``"derived"`` for ``base_lr`` applies the batch-size scaling
rule lr = 0.3 * batch/256.
"""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path
from typing import Callable, Sequence

from .config import ExperimentConfig, derived_lr
from .pretrain import RunRecord, pretrain
from .manifest import load_manifest

__all__ = ["expand_grid", "run_sweep", "sweep_table", "read_final_loss"]

DERIVED = "derived"


def expand_grid(axes: dict[str, Sequence]) -> list[dict]:
    """All combinations of the axis values, in deterministic order.

    Axes are iterated in sorted key order; the grid is the Cartesian
    product of their value lists.  Empty axes are an error.
    """
    if not axes:
        raise ValueError("no sweep axes given")
    for key, values in axes.items():
        if not isinstance(values, (list, tuple)) or len(values) == 0:
            raise ValueError(f"sweep axis {key!r} has no values")
    keys = sorted(axes)
    grid = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        point = dict(zip(keys, combo))
        if point.get("base_lr") == DERIVED:
            if "batch_size" not in point:
                raise ValueError("derived base_lr requires a batch_size axis")
            point["base_lr"] = derived_lr(point["batch_size"])
        grid.append(point)
    return grid


def _run_id(point: dict) -> str:
    parts = []
    for key in sorted(point):
        value = point[key]
        text = f"{value:g}" if isinstance(value, float) else str(value)
        parts.append(f"{key}={text}")
    return "_".join(parts)


def _default_runner(config: ExperimentConfig, run_dir: Path, run_id: str) -> RunRecord:
    manifest_path = config.resolve_path(config.unsupervised_manifest)
    if manifest_path is None:
        raise ValueError("sweep config needs unsupervised_manifest")
    manifest = load_manifest(manifest_path)
    result = pretrain(config.pretrain_config(), manifest, run_dir, run_id=run_id)
    return result.record


def run_sweep(
    base: ExperimentConfig,
    axes: dict[str, Sequence],
    out_dir: str | Path,
    runner: Callable[[ExperimentConfig, Path, str], "RunRecord | float"] | None = None,
    force: bool = False,
) -> list[RunRecord]:
    """Execute the full grid; one RunRecord per point, divergences included.

    ``runner`` may return a RunRecord or a bare final-loss float; a
    non-finite loss (or a raised exception) is recorded as a diverged or
    failed run and the sweep continues.  Completed points found in the
    on-disk journal are skipped unless ``force``.
    """
    runner = runner or _default_runner
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    journal_path = out_dir / "sweep_journal.json"
    journal: dict[str, str] = {}
    if journal_path.exists() and not force:
        journal = json.loads(journal_path.read_text())

    records: list[RunRecord] = []
    for point in expand_grid(axes):
        run_id = _run_id(point)
        run_dir = out_dir / run_id
        record_path = run_dir / "run_record.json"
        if not force and journal.get(run_id) and record_path.exists():
            records.append(RunRecord.load(record_path))
            continue
        config = base.with_overrides(run_id=run_id, **point)
        run_dir.mkdir(parents=True, exist_ok=True)
        config.save(run_dir / "config.yaml")
        try:
            outcome = runner(config, run_dir, run_id)
        except Exception as exc:  # a failed point must not kill the sweep
            record = RunRecord(run_id, config.to_dict(), "failed", notes=[str(exc)])
        else:
            if isinstance(outcome, RunRecord):
                record = outcome
            else:
                loss = float(outcome)
                status = "completed" if math.isfinite(loss) else "diverged"
                record = RunRecord(
                    run_id, config.to_dict(), status, notes=[f"final_loss={loss}"]
                )
        record.save(record_path)
        records.append(record)
        journal[run_id] = record.status
        journal_path.write_text(json.dumps(journal, indent=2))
    return records


def read_final_loss(record: RunRecord) -> float | None:
    """Last epoch-mean loss of a run, from its metrics stream or notes."""
    if record.metrics_path and Path(record.metrics_path).exists():
        last = None
        for line in Path(record.metrics_path).read_text().splitlines():
            if line.strip():
                last = json.loads(line)
        if last is not None:
            return float(last["loss"])
    for note in record.notes:
        if note.startswith("final_loss="):
            value = float(note.split("=", 1)[1])
            return value if math.isfinite(value) else None
    return None


def sweep_table(
    records: Sequence[RunRecord],
    row_key: str = "batch_size",
    col_key: str = "base_lr",
) -> str:
    """Aggregate grid results as CSV: rows by one axis, columns by the other.

    Diverged/failed points render as '-', matching how non-converging
    configurations are reported.
    """
    rows = sorted({r.config[row_key] for r in records})
    cols = sorted({r.config[col_key] for r in records})
    by_point = {(r.config[row_key], r.config[col_key]): r for r in records}
    lines = [f"{row_key}/{col_key}," + ",".join(str(c) for c in cols)]
    for row in rows:
        cells = []
        for col in cols:
            record = by_point.get((row, col))
            if record is None or record.status != "completed":
                cells.append("-")
            else:
                loss = read_final_loss(record)
                cells.append("-" if loss is None else f"{loss:.4f}")
        lines.append(f"{row}," + ",".join(cells))
    return "\n".join(lines) + "\n"
