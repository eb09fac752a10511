#!/usr/bin/env python3
"""Publication-style figures from harness CSV tables.

Reads only the CSV schema emitted by the thermoconv harness; nothing is
recomputed here beyond presentation (axis scaling and the annotated
least-squares slope over the four smallest x values, the same windowed fit
the harness reports).

Column selectors are either plain header names or absolute differences
written as ``|A-B|``.  Rows can be restricted with ``--where col=value``
(numeric equality within 1e-12), which is how a single time slice is cut
out of a sweep table.

Usage:
    render.py --csv sweep.csv --x eps --y "|F_eps-F_bar|" \
              --scale loglog --fit --out fig.svg [--where t=0.5]

SVG output is byte-deterministic: the figure hash salt and metadata are
pinned so identical inputs give identical files.
"""

from __future__ import annotations

import argparse
import csv
import math
import re
from dataclasses import dataclass
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

FIT_WINDOW = 4


class RenderError(Exception):
    pass


class MissingColumn(RenderError):
    pass


class EmptyData(RenderError):
    pass


@dataclass
class PlotJob:
    input_csv: str
    x_column: str
    y_columns: List[str]
    scale: str = "loglog"
    fit: bool = False
    output: str = "figure.svg"
    where: Optional[str] = None

    def __post_init__(self):
        if self.scale not in ("loglog", "semilog", "linear"):
            raise RenderError(f"unknown scale {self.scale!r}")


def read_rows(path: str) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EmptyData(f"{path} has no data rows")
    return rows


def column_values(rows: list, spec: str):
    """Resolve a column spec: plain name, or |A-B| absolute difference."""
    m = re.fullmatch(r"\|\s*([^|+-]+)\s*-\s*([^|+-]+)\s*\|", spec)
    header = rows[0].keys()
    if m:
        a, b = m.group(1).strip(), m.group(2).strip()
        for name in (a, b):
            if name not in header:
                raise MissingColumn(f"column {name!r} not in CSV header")
        return [abs(float(r[a]) - float(r[b])) for r in rows]
    if spec not in header:
        raise MissingColumn(f"column {spec!r} not in CSV header")
    return [float(r[spec]) for r in rows]


def apply_where(rows: list, where: Optional[str]) -> list:
    if not where:
        return rows
    if "=" not in where:
        raise RenderError("--where expects col=value")
    col, val = where.split("=", 1)
    col = col.strip()
    if col not in rows[0]:
        raise MissingColumn(f"column {col!r} not in CSV header")
    target = float(val)
    kept = [r for r in rows if abs(float(r[col]) - target) <= 1e-12 * max(1.0, abs(target))]
    if not kept:
        raise EmptyData(f"no rows with {col} = {val}")
    return kept


def fitted_slope(xs, ys, window: int = FIT_WINDOW) -> float:
    """Least-squares slope of log y vs log x over the `window` smallest x.

    Matches the harness rate fit: same window, same centered normal
    equations.  Returns nan when fewer than two positive points remain.
    """
    pairs = sorted(zip(xs, ys))[:window]
    pairs = [(x, y) for x, y in pairs if x > 0 and y > 0]
    if len(pairs) < 2:
        return float("nan")
    lx = [math.log(x) for x, _ in pairs]
    ly = [math.log(y) for _, y in pairs]
    mx = sum(lx) / len(lx)
    my = sum(ly) / len(ly)
    sxx = sum((u - mx) ** 2 for u in lx)
    sxy = sum((u - mx) * (v - my) for u, v in zip(lx, ly))
    return sxy / sxx


def render(job: PlotJob) -> dict:
    """Render the job to job.output; returns the per-series fitted slopes."""
    rows = apply_where(read_rows(job.input_csv), job.where)
    xs = column_values(rows, job.x_column)
    plt.rcParams["svg.hashsalt"] = "thermoconv-plots"
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    slopes = {}
    for spec in job.y_columns:
        ys = column_values(rows, spec)
        order = sorted(range(len(xs)), key=lambda i: xs[i])
        sx = [xs[i] for i in order]
        sy = [ys[i] for i in order]
        label = spec
        if job.fit:
            slope = fitted_slope(xs, ys)
            slopes[spec] = slope
            label = f"{spec} (slope {slope:.3f})"
        ax.plot(sx, sy, marker="o", label=label)
    if job.scale == "loglog":
        ax.set_xscale("log")
        ax.set_yscale("log")
    elif job.scale == "semilog":
        ax.set_yscale("log")
    ax.set_xlabel(job.x_column)
    ax.set_ylabel(", ".join(job.y_columns))
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    if job.fit and slopes:
        text = "; ".join(f"slope[{k}] = {v:.6f}" for k, v in slopes.items())
        ax.set_title(text, fontsize=9)
    fig.tight_layout()
    fig.savefig(job.output, metadata=_deterministic_metadata(job.output))
    plt.close(fig)
    return slopes


def _deterministic_metadata(path: str):
    if path.endswith(".svg"):
        return {"Date": None}
    if path.endswith(".png"):
        return {"Software": None}
    return None


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--csv", required=True, dest="input_csv")
    parser.add_argument("--x", required=True, dest="x_column")
    parser.add_argument(
        "--y",
        required=True,
        dest="y_columns",
        action="append",
        help="y column (repeatable); supports |A-B| differences",
    )
    parser.add_argument(
        "--scale", default="loglog", choices=["loglog", "semilog", "linear"]
    )
    parser.add_argument("--fit", action="store_true")
    parser.add_argument("--out", required=True, dest="output")
    parser.add_argument("--where", default=None)
    args = parser.parse_args(argv)
    job = PlotJob(
        input_csv=args.input_csv,
        x_column=args.x_column,
        y_columns=args.y_columns,
        scale=args.scale,
        fit=args.fit,
        output=args.output,
        where=args.where,
    )
    try:
        slopes = render(job)
    except RenderError as exc:
        print(f"error: {exc}")
        return 2
    for name, slope in slopes.items():
        print(f"slope[{name}] = {slope:.6f}")
    print(f"wrote {job.output}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
