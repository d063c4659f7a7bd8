#!/usr/bin/env python3
"""
Report writers: CSV files and Markdown tables.

Quality reports print as one row of Frechet distances with one column per
configuration (FP32, BF16, INT8, mixed...); latency reports print the same
layout with median seconds. Kernel micro-benchmarks go to a flat CSV.
"""

import csv
import logging
import os
from typing import Iterable, List, Optional

from evaluation import BenchReport, KernelBenchRow
from kernels import BufferPlan

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["label", "precision_mix", "steps", "boundary", "frechet",
                  "median_s", "p10_s", "p90_s", "repeats"]
KERNEL_COLUMNS = ["kernel", "config", "threads", "median_ns", "p10_ns", "p90_ns"]


def _ensure_parent(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def write_report_csv(report: BenchReport, path: str):
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            writer.writerow([
                row.label, row.precision_mix, row.steps, row.boundary, _fmt(row.frechet, 6),
                _fmt(row.median_s, 6), _fmt(row.p10_s, 6), _fmt(row.p90_s, 6),
                "" if row.repeats is None else row.repeats,
            ])
    logger.info(f"Wrote {len(report.rows)} report rows to {path}")


def report_markdown(report: BenchReport, metric: str = "frechet") -> str:
    """
    One column per configuration, one row of values.

    Args:
        report: Quality or latency report
        metric: frechet (distance) or latency (median seconds)
    """
    if metric not in ("frechet", "latency"):
        raise ValueError(f"Unknown report metric {metric!r}")
    labels = [row.label for row in report.rows]
    if metric == "frechet":
        name = "Frechet distance"
        values = [_fmt(row.frechet) for row in report.rows]
    else:
        name = "Median latency"
        values = [f"{row.median_s:.4f}s" if row.median_s is not None else "" for row in report.rows]
    lines = [
        f"**{report.title}**",
        "",
        "| Precision | " + " | ".join(labels) + " |",
        "|---" * (len(labels) + 1) + "|",
        f"| {name} | " + " | ".join(values) + " |",
    ]
    return "\n".join(lines) + "\n"


def write_report_markdown(report: BenchReport, path: str, metric: str = "frechet"):
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_markdown(report, metric))
    logger.info(f"Wrote Markdown table to {path}")


def write_kernel_csv(rows: Iterable[KernelBenchRow], path: str):
    _ensure_parent(path)
    rows = list(rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(KERNEL_COLUMNS)
        for row in rows:
            writer.writerow([row.kernel, row.config, row.threads,
                             f"{row.median_ns:.0f}", f"{row.p10_ns:.0f}", f"{row.p90_ns:.0f}"])
    logger.info(f"Wrote {len(rows)} kernel benchmark rows to {path}")


def buffer_plan_summary(plan: BufferPlan) -> dict:
    return {
        "activations": plan.naive_count,
        "arenas": plan.arena_count,
        "naive_bytes": plan.naive_bytes,
        "arena_bytes": plan.total_bytes,
    }


def read_csv_rows(path: str) -> List[dict]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
