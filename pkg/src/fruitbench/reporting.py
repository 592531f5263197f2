"""Render benchmark artifacts as markdown, CSV, or JSON text.

Three renderers: dataset statistics tables, metric grids over experiment
settings (rows) by category (column groups of mAP/AP50/mAR), and inference
timing summaries. Rendering is pure: identical inputs produce byte
identical output. Display conventions: counts carry thousands separators,
statistics averages round half-to-even to integers, metrics are shown
x100 with one decimal, missing values render as an em dash.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .datamodel import DatasetStats
from .errors import ParseError, ValidationError
from .evaluation import EvaluationReport

__all__ = [
    "GridRow",
    "ExperimentGrid",
    "TimingRecord",
    "render_stats_table",
    "render_metric_grid",
    "load_timing_log",
    "summarize_timing",
]

FORMATS = ("markdown", "csv", "json")
MISSING = "—"
METRIC_KEYS = ("mAP", "AP50", "mAR")


@dataclass(frozen=True)
class GridRow:
    """One experiment setting: a split manifest plus a prediction file."""

    label: str
    manifest: str
    predictions: str


@dataclass(frozen=True)
class ExperimentGrid:
    rows: tuple[GridRow, ...]
    metrics: tuple[str, ...] = METRIC_KEYS
    output_format: str = "markdown"

    def __post_init__(self):
        labels = [r.label for r in self.rows]
        if len(labels) != len(set(labels)):
            raise ValidationError("grid row labels must be unique")
        for metric in self.metrics:
            if metric not in METRIC_KEYS:
                raise ValidationError(f"unknown metric {metric!r}; choose from {METRIC_KEYS}")
        if self.output_format not in FORMATS:
            raise ValidationError(f"unknown format {self.output_format!r}")

    def check_files_exist(self, base: Path | None = None) -> None:
        for row in self.rows:
            for path in (row.manifest, row.predictions):
                resolved = (base / path) if base is not None else Path(path)
                if not Path(resolved).is_file():
                    raise ValidationError(f"grid row {row.label!r}: missing file {path}")


@dataclass(frozen=True)
class TimingRecord:
    model: str
    latencies_ms: tuple[float, ...]

    def __post_init__(self):
        if not self.latencies_ms:
            raise ValidationError(f"model {self.model!r}: empty latency list")
        if any(v <= 0 for v in self.latencies_ms):
            raise ValidationError(f"model {self.model!r}: latencies must be positive")

    @property
    def mean_ms(self) -> float:
        return sum(self.latencies_ms) / len(self.latencies_ms)


def _fmt_count(n: int) -> str:
    return f"{n:,}"


def _fmt_rounded(value: float | None) -> str:
    # round() is round-half-to-even, matching the documented display rule.
    return MISSING if value is None else f"{round(value):,}"


def _fmt_metric(value: float | None) -> str:
    return MISSING if value is None else f"{value * 100:.1f}"


def _markdown_table(header: list[str], rows: list[list[str]]) -> str:
    lines = [
        "| " + " | ".join(header) + " |",
        "| " + " | ".join("---" for _ in header) + " |",
    ]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def _csv_table(header: list[str], rows: list[list[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def render_stats_table(stats: DatasetStats, output_format: str = "markdown") -> str:
    """Dataset statistics with a total row."""
    if output_format not in FORMATS:
        raise ValidationError(f"unknown format {output_format!r}")
    if output_format == "json":
        payload = {
            "categories": [
                {
                    "name": row.name,
                    "images": row.image_count,
                    "bboxes": row.bbox_count,
                    "avg_bboxes_per_image": row.avg_boxes_per_image,
                    "avg_size_per_instance": row.avg_instance_area,
                    "region": row.region,
                }
                for row in stats.per_category
            ],
            "total": {
                "name": stats.total.name,
                "images": stats.total.image_count,
                "bboxes": stats.total.bbox_count,
                "avg_bboxes_per_image": stats.total.avg_boxes_per_image,
                "avg_size_per_instance": stats.total.avg_instance_area,
                "region": stats.total.region,
            },
        }
        return json.dumps(payload, indent=2) + "\n"
    header = ["Category", "# imgs", "# bboxes", "avg bboxes/image", "avg size/instance", "Region"]
    rows = []
    for row in list(stats.per_category) + [stats.total]:
        rows.append(
            [
                row.name,
                _fmt_count(row.image_count),
                _fmt_count(row.bbox_count),
                _fmt_rounded(row.avg_boxes_per_image),
                _fmt_rounded(row.avg_instance_area),
                row.region,
            ]
        )
    if output_format == "markdown":
        return _markdown_table(header, rows)
    return _csv_table(header, rows)


def _grid_categories(reports) -> list[tuple[int, str]]:
    seen: dict[int, str] = {}
    for report in reports.values():
        for row in report.per_category:
            seen.setdefault(row.category_id, row.name)
    return sorted(seen.items())


def render_metric_grid(
    grid: ExperimentGrid, reports: dict[str, EvaluationReport]
) -> tuple[str, int]:
    """Rows are experiment settings, column groups are categories.

    Returns the rendered text and the number of missing cells (rendered as
    an em dash): either the row's report was not supplied or the metric is
    absent in it.
    """
    categories = _grid_categories(reports)
    warnings = 0
    table_rows = []
    json_rows = []
    for row in grid.rows:
        report = reports.get(row.label)
        cells = [row.label]
        json_cells: dict[str, dict] = {}
        for cat_id, cat_name in categories:
            cat_row = None
            if report is not None:
                cat_row = next(
                    (r for r in report.per_category if r.category_id == cat_id), None
                )
            values = {
                "mAP": cat_row.map if cat_row else None,
                "AP50": cat_row.ap50 if cat_row else None,
                "mAR": cat_row.mar if cat_row else None,
            }
            json_cells[cat_name] = {m: values[m] for m in grid.metrics}
            for metric in grid.metrics:
                if values[metric] is None:
                    warnings += 1
                cells.append(_fmt_metric(values[metric]))
        table_rows.append(cells)
        json_rows.append({"label": row.label, "cells": json_cells})
    if grid.output_format == "json":
        return json.dumps({"rows": json_rows, "missing_cells": warnings}, indent=2) + "\n", warnings
    header = ["Setting"] + [
        f"{name} {metric}" for _, name in categories for metric in grid.metrics
    ]
    if grid.output_format == "markdown":
        return _markdown_table(header, table_rows), warnings
    return _csv_table(header, table_rows), warnings


def load_timing_log(path) -> list[TimingRecord]:
    """Read a JSON-lines latency log ({model, image_id, latency_ms} per
    line) and group it by model in order of first appearance."""
    path = Path(path)
    grouped: dict[str, list[float]] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{line_no}: {exc.msg}", offset=exc.pos) from exc
        try:
            model = str(record["model"])
            latency = float(record["latency_ms"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{line_no}: bad timing record {record!r}") from exc
        grouped.setdefault(model, []).append(latency)
    return [TimingRecord(model, tuple(values)) for model, values in grouped.items()]


def summarize_timing(records: list[TimingRecord], output_format: str = "markdown") -> str:
    """Per-model mean latency and FPS = 1000 / mean latency, one decimal
    each (so FPS x latency stays consistent within display rounding)."""
    if output_format not in FORMATS:
        raise ValidationError(f"unknown format {output_format!r}")
    if output_format == "json":
        payload = [
            {
                "model": r.model,
                "fps": round(1000.0 / r.mean_ms, 1),
                "mean_latency_ms": round(r.mean_ms, 1),
                "images": len(r.latencies_ms),
            }
            for r in records
        ]
        return json.dumps(payload, indent=2) + "\n"
    header = ["Model", "FPS (imgs/s)", "Inference time per image (ms)"]
    rows = [
        [r.model, f"{1000.0 / r.mean_ms:.1f}", f"{r.mean_ms:.1f}"] for r in records
    ]
    if output_format == "markdown":
        return _markdown_table(header, rows)
    return _csv_table(header, rows)
