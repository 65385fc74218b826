"""Run-history rows and deterministic CSV export.

The fixed column list below is schema version 1 of the metrics CSV;
changing it means bumping every consumer, so append-only evolution with a
new version is the rule.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

CSV_HEADER = ["phase", "cycle_or_iter", "task", "split", "accuracy", "loss",
              "lr", "alpha", "beta", "labeled_count", "seed"]
_FLOAT_FIELDS = {"accuracy", "loss", "lr", "alpha", "beta"}


@dataclass(frozen=True)
class MetricsRow:
    """One measurement: unique per (phase, cycle_or_iter, task, split)."""

    phase: str                      # "kaa" | "cal" | "eval"
    cycle_or_iter: int
    task: str                       # "1".."M" or "avg"
    split: str
    accuracy: float | None = None
    loss: float | None = None
    lr: float | None = None
    alpha: float | None = None
    beta: float | None = None
    labeled_count: int | None = None
    seed: int | None = None

    def to_csv_row(self) -> list[str]:
        values = asdict(self)
        row = []
        for key in CSV_HEADER:
            v = values[key]
            if v is None:
                row.append("")
            elif key in _FLOAT_FIELDS:
                row.append(f"{v:.6f}")
            else:
                row.append(str(v))
        return row


def _sort_key(row: MetricsRow):
    phase_order = {"kaa": 0, "cal": 1, "eval": 2}
    task_order = (1, int(row.task)) if row.task.isdigit() else (2, 0)
    return (phase_order.get(row.phase, 3), row.cycle_or_iter, task_order, row.split)


def render_metrics_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in sorted(history, key=_sort_key):
        writer.writerow(row.to_csv_row())
    return buf.getvalue()


def export_metrics(history, path) -> Path:
    """Write the history as CSV with a deterministic row order."""
    if not history:
        warnings.warn("exporting an empty metrics history; writing header only")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_metrics_csv(history))
    return path


def rows_to_dicts(history) -> list[dict]:
    return [asdict(row) for row in sorted(history, key=_sort_key)]


def rows_from_dicts(dicts) -> list[MetricsRow]:
    return [MetricsRow(**d) for d in dicts]
