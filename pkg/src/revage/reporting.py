"""Render metric rows into per-target-age tables and bar charts."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import UsageError

METRIC_COLUMNS = ("trwc", "t_age", "age_mae")


def load_rows(rows_csv: Path | str) -> list[dict]:
    path = Path(rows_csv)
    if not path.exists():
        raise UsageError(f"rows file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [dict(r) for r in csv.DictReader(fh)]
    if not rows:
        raise UsageError(f"rows file is empty: {path}")
    return rows


def aggregate_by_target(rows: list[dict]) -> list[dict]:
    """One line per target age: clip count plus the mean of each metric."""
    by_target: dict[float, list[dict]] = {}
    for row in rows:
        by_target.setdefault(float(row["target_age"]), []).append(row)
    table = []
    for target in sorted(by_target):
        subset = by_target[target]
        line = {"target_age": target, "clips": len(subset)}
        for metric in METRIC_COLUMNS:
            line[metric] = float(np.mean([float(r[metric]) for r in subset]))
        table.append(line)
    return table


def write_report(rows_csv: Path | str, out_dir: Path | str) -> list[Path]:
    """Write ``report_table.csv`` plus one bar chart PNG per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = load_rows(rows_csv)
    table = aggregate_by_target(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    table_path = out_dir / "report_table.csv"
    with table_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["target_age", "clips", *METRIC_COLUMNS])
        writer.writeheader()
        for line in table:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in line.items()})
    written.append(table_path)

    targets = [line["target_age"] for line in table]
    labels = [f"{t:g}" for t in targets]
    for metric in METRIC_COLUMNS:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar(range(len(targets)), [line[metric] for line in table], color="#4878a8")
        ax.set_xticks(range(len(targets)), labels)
        ax.set_xlabel("target age")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} per target age")
        fig.tight_layout()
        path = out_dir / f"bar_{metric}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
