"""Static SVG line charts of sweep CSVs (success rate against k or sequence length)."""
from __future__ import annotations

import csv
import io
import statistics
from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402


class PlotError(ValueError):
    pass


def read_sweep_csv(path: str | Path) -> tuple[dict[str, dict[int, list[float]]], str]:
    """Group success rates by variant and x value; x is ``length`` if present, else ``k``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PlotError(f"{path}:1: empty file")
    header = rows[0]
    xcol = "length" if "length" in header else "k"
    for col in (xcol, "variant", "success_rate"):
        if col not in header:
            raise PlotError(f"{path}:1: missing column {col!r}")
    ix, iv, ir = header.index(xcol), header.index("variant"), header.index("success_rate")
    series: dict[str, dict[int, list[float]]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise PlotError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            x, rate = int(row[ix]), float(row[ir])
        except ValueError as exc:
            raise PlotError(f"{path}:{lineno}: {exc}") from None
        series.setdefault(row[iv], {}).setdefault(x, []).append(rate)
    if not series:
        raise PlotError(f"{path}: no data rows")
    return series, xcol


def series_stats(points: dict[int, list[float]]) -> tuple[list[int], list[float], list[float]]:
    """Sorted x, mean and sample std (0 for a single value) per x."""
    xs = sorted(points)
    means = [statistics.fmean(points[x]) for x in xs]
    stds = [statistics.stdev(points[x]) if len(points[x]) > 1 else 0.0 for x in xs]
    return xs, means, stds


def render_svg(series: dict[str, dict[int, list[float]]], xlabel: str) -> str:
    """Mean +/- std per variant. Output bytes depend only on the input."""
    with plt.rc_context({"svg.hashsalt": "case-lab", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name in sorted(series):
            xs, means, stds = series_stats(series[name])
            ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3, label=name)
        ax.set_xlabel("k" if xlabel == "k" else "tasks in sequence")
        ax.set_ylabel("success rate")
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return buf.getvalue()
