"""Plain-file exports: P6 heatmaps, grid/rank/series CSVs, the text report.

Heatmaps use a diverging blue-white-red ramp with grid row 0 as the top
(northmost) image row; non-finite cells render neutral gray. CSV floats
are printed with 9 significant digits, enough for binary32 values to
re-parse bit-exactly.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import RegionSpec
from .errors import ContractError, FormatError
from .metrics import MetricsReport, SeriesRow, StationScore

GRAY = (128, 128, 128)
BLUE = (10, 30, 150)
RED = (160, 20, 25)


def _ramp(t: np.ndarray) -> np.ndarray:
    """Diverging colormap on t in [0, 1]: blue at 0, white at 0.5, red at 1."""
    rgb = np.empty(t.shape + (3,), dtype=np.float64)
    lower = t < 0.5
    u = np.where(lower, t * 2.0, (t - 0.5) * 2.0)[..., None]
    blue = np.asarray(BLUE, dtype=np.float64)
    red = np.asarray(RED, dtype=np.float64)
    white = np.full(3, 255.0)
    rgb[lower] = (blue + (white - blue) * u[lower])
    rgb[~lower] = (white + (red - white) * u[~lower])
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_heatmap(grid: np.ndarray, path, vmin: float | None = None,
                  vmax: float | None = None) -> None:
    """Render a 2-D grid as a binary P6 PPM.

    Auto scale maps the finite min/max to the extreme colors; a constant
    grid renders uniformly in the midpoint color.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ContractError(f"write_heatmap: grid must be 2-D, got shape {grid.shape}")
    finite = np.isfinite(grid)
    if finite.any():
        if vmin is None:
            vmin = float(grid[finite].min())
        if vmax is None:
            vmax = float(grid[finite].max())
    else:
        vmin, vmax = 0.0, 0.0
    if vmax > vmin:
        t = np.clip((grid - vmin) / (vmax - vmin), 0.0, 1.0)
    else:
        t = np.full(grid.shape, 0.5)
    t = np.where(finite, t, 0.5)
    rgb = _ramp(t)
    rgb[~finite] = GRAY
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _fmt(v: float) -> str:
    return f"{float(v):.9g}"


def write_grid_csv(grid: np.ndarray, spec: RegionSpec, path) -> None:
    """One line per cell: row, col, lat, lon, value (9 significant digits)."""
    grid = np.asarray(grid)
    if grid.shape != (spec.h, spec.w):
        raise ContractError(f"write_grid_csv: grid {grid.shape} must match region {(spec.h, spec.w)}")
    lines = ["row,col,lat,lon,value"]
    for r in range(spec.h):
        for c in range(spec.w):
            lat, lon = spec.cell_center(r, c)
            lines.append(f"{r},{c},{_fmt(lat)},{_fmt(lon)},{_fmt(grid[r, c])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid_csv(path) -> np.ndarray:
    """Rebuild the float32 grid a write_grid_csv call described."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "row,col,lat,lon,value":
        raise FormatError(f"{path}: missing grid CSV header")
    cells = []
    for ln, line in enumerate(lines[1:], 2):
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError(f"{path}: line {ln} has {len(parts)} fields, expected 5")
        cells.append((int(parts[0]), int(parts[1]), np.float32(parts[4])))
    if not cells:
        raise FormatError(f"{path}: no cells")
    h = max(r for r, _, _ in cells) + 1
    w = max(c for _, c, _ in cells) + 1
    grid = np.full((h, w), np.nan, dtype=np.float32)
    for r, c, v in cells:
        grid[r, c] = v
    return grid


def write_ranks_csv(rows: Sequence[StationScore], path) -> None:
    lines = ["rank,row,col,lat,lon,uq_score,rmse"]
    for i, s in enumerate(rows, 1):
        lines.append(f"{i},{s.row},{s.col},{_fmt(s.lat)},{_fmt(s.lon)},"
                     f"{_fmt(s.uq_score)},{_fmt(s.rmse)}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_series_csv(rows: Sequence[SeriesRow], path) -> None:
    lines = ["date,y,mid,lo,hi"]
    for s in rows:
        lines.append(f"{s.date.isoformat()},{_fmt(s.y)},{_fmt(s.mid)},{_fmt(s.lo)},{_fmt(s.hi)}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_report(report: MetricsReport, path) -> None:
    """Key=value lines, a blank line, then the same numbers as a CSV table."""
    pairs: list[tuple[str, str]] = []
    for field in dataclasses.fields(report):
        value = getattr(report, field.name)
        if value is None:
            continue
        if field.name == "rmse_per_seed":
            pairs.append((field.name, ",".join(_fmt(v) for v in value)))
        elif isinstance(value, float):
            pairs.append((field.name, _fmt(value)))
        else:
            pairs.append((field.name, str(value)))
    lines = [f"{k}={v}" for k, v in pairs]
    lines.append("")
    lines.append("metric,value")
    for k, v in pairs:
        if k in ("region", "uq_method"):
            continue
        lines.append(f'{k},"{v}"' if "," in v else f"{k},{v}")
    Path(path).write_text("\n".join(lines) + "\n")
