"""CSV tables and matching gnuplot scripts for the standard figures."""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import ContractError

SCHEMAS = {
    "loss_curve": ("epoch", "loss"),
    "rate_curve": ("n", "eps", "seed", "kl", "kl_smoothed"),
    "pmf_bar": ("atom", "target", "model"),
    "trajectory_bundle": ("path_id", "t", "z"),
}

_SCRIPTS = {
    "loss_curve": """set datafile separator ','
set key autotitle columnhead
set xlabel 'epoch'
set ylabel 'mean loss'
plot '{csv}' using 1:2 with lines
""",
    "rate_curve": """set datafile separator ','
set key autotitle columnhead
set logscale xy
set xlabel 'n'
set ylabel 'KL (smoothed)'
plot '{csv}' using 1:5 with points
""",
    "pmf_bar": """set datafile separator ','
set key autotitle columnhead
set style data histograms
set style fill solid 0.5
plot '{csv}' using 2:xtic(1), '' using 3
""",
    "trajectory_bundle": """set datafile separator ','
set key off
set xlabel 't'
set ylabel 'z'
plot '{csv}' using 2:3:1 with lines lc variable
""",
}


def _check_schema(kind: str, columns) -> None:
    if kind not in SCHEMAS:
        raise ContractError(f"unknown plot kind {kind!r}")
    want = SCHEMAS[kind]
    columns = tuple(columns)
    if kind == "trajectory_bundle" and len(columns) > 3:
        # one z column per coordinate in more than one dimension
        ok = columns[:2] == want[:2] and all(c == f"z{i + 1}" for i, c in enumerate(columns[2:]))
    else:
        ok = columns == want
    if not ok:
        raise ContractError(f"{kind} expects columns {want}, got {columns}")


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ContractError(f"row {row} does not match columns {columns}")
            w.writerow([fmt(v) for v in row])


def emit_plot_data(columns, rows, kind: str, out_dir) -> tuple[Path, Path]:
    """Write ``<kind>.csv`` and a gnuplot script ``<kind>.gp`` that reads only it."""
    _check_schema(kind, columns)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{kind}.csv"
    gp_path = out / f"{kind}.gp"
    write_csv(csv_path, columns, rows)
    gp_path.write_text(_SCRIPTS[kind].format(csv=csv_path.name))
    return csv_path, gp_path
