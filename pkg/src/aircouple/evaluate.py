"""Latitude-weighted RMSE, baseline-normalized scores, scorecards and map export."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from aircouple.dataio import STEP, GridPack
from aircouple.errors import ShapeError
from aircouple.grid import GridSpec, as_utc, format_time, latitude_weights


def weighted_rmse(pred, truth, w):
    """sqrt(sum w (pred - truth)^2 / sum w) per variable over ``M x N (x C)`` fields."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty field")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != pred.shape[:1]:
        raise ShapeError(f"{w.shape[0]} weights for {pred.shape[0]} rows")
    wb = np.broadcast_to(w.reshape((-1,) + (1,) * (pred.ndim - 1)), pred.shape)
    total = wb.sum(axis=(0, 1))
    if np.any(total <= 0):
        raise ValueError("latitude weights sum to zero")
    return np.sqrt((wb * (pred - truth) ** 2).sum(axis=(0, 1)) / total)


@dataclasses.dataclass
class EvalReport:
    variables: tuple[str, ...]
    lead_hours: tuple[int, ...]
    rmse: np.ndarray  # variables x leads, physical units
    baseline_rmse: np.ndarray | None = None
    pressure_levels: tuple[int, ...] = ()
    n_inits: int = 1

    def __post_init__(self):
        self.variables = tuple(self.variables)
        self.lead_hours = tuple(int(h) for h in self.lead_hours)
        self.pressure_levels = tuple(self.pressure_levels)
        self.rmse = np.asarray(self.rmse, dtype=np.float64)
        shape = (len(self.variables), len(self.lead_hours))
        if self.rmse.shape != shape:
            raise ShapeError(f"rmse shape {self.rmse.shape}, expected {shape}")
        if self.baseline_rmse is not None:
            self.baseline_rmse = np.asarray(self.baseline_rmse, dtype=np.float64)
            if self.baseline_rmse.shape != shape:
                raise ShapeError(f"baseline shape {self.baseline_rmse.shape}, expected {shape}")

    @property
    def normalized(self) -> np.ndarray | None:
        if self.baseline_rmse is None:
            return None
        return _ratio(self.rmse, self.baseline_rmse)

    def with_baseline(self, baseline: EvalReport) -> EvalReport:
        _check_keys(self, baseline)
        return dataclasses.replace(self, baseline_rmse=baseline.rmse)

    def to_dict(self) -> dict:
        def clean(a):
            return None if a is None else [[None if np.isnan(v) else float(v) for v in row] for row in a]

        return {
            "variables": list(self.variables),
            "lead_hours": list(self.lead_hours),
            "pressure_levels": list(self.pressure_levels),
            "n_inits": self.n_inits,
            "rmse": clean(self.rmse),
            "baseline_rmse": clean(self.baseline_rmse),
            "normalized_rmse": clean(self.normalized),
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        def arr(a):
            return None if a is None else np.array([[np.nan if v is None else v for v in row] for row in a], dtype=float)

        return cls(
            d["variables"], d["lead_hours"], arr(d["rmse"]), arr(d.get("baseline_rmse")),
            d.get("pressure_levels", ()), d.get("n_inits", 1),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, allow_nan=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> EvalReport:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _check_keys(a: EvalReport, b: EvalReport):
    if a.variables != b.variables or a.lead_hours != b.lead_hours:
        raise ValueError("reports differ in variables or lead times")


def _ratio(model, baseline):
    model = np.asarray(model, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = model / baseline
    out = np.where((baseline == 0) & (model == 0), 1.0, out)
    return np.where((baseline == 0) & (model > 0), np.inf, out)


def normalized_rmse(model_report, baseline_report):
    """Model RMSE / baseline RMSE (< 1: model better). Zero baseline -> inf."""
    if isinstance(model_report, EvalReport):
        _check_keys(model_report, baseline_report)
        return _ratio(model_report.rmse, baseline_report.rmse)
    return _ratio(model_report, baseline_report)


def _init_time(pack: GridPack):
    if "init_time" in pack.attrs:
        return as_utc(pack.attrs["init_time"])
    return pack.times[0] - STEP


def evaluate_forecasts(forecasts: Sequence[GridPack], truth: GridPack, variables=None) -> EvalReport:
    """Weighted RMSE per (variable, lead), per initialization, then averaged."""
    if not forecasts:
        raise ValueError("no forecasts to evaluate")
    catalog = truth.catalog
    variables = tuple(variables or catalog.pollutant_vars)
    w = latitude_weights(truth.grid)
    sums, counts = {}, {}
    for fc in forecasts:
        if fc.grid != truth.grid:
            raise ShapeError("forecast and truth grids differ")
        idx_f = [fc.catalog.pollutant_vars.index(v) for v in variables]
        idx_t = [catalog.pollutant_vars.index(v) for v in variables]
        init = _init_time(fc)
        for k, t in enumerate(fc.times):
            lead = int((t - init).total_seconds() // 3600)
            ti = truth.time_index(t)
            err = weighted_rmse(np.asarray(fc.pollutants[k])[..., idx_f], np.asarray(truth.pollutants[ti])[..., idx_t], w)
            sums[lead] = sums.get(lead, 0.0) + err
            counts[lead] = counts.get(lead, 0) + 1
    leads = sorted(sums)
    rmse = np.stack([sums[h] / counts[h] for h in leads], axis=1)
    return EvalReport(variables, leads, rmse, None, catalog.pressure_levels, len(forecasts))


def persistence_report(forecasts: Sequence[GridPack], truth: GridPack, variables=None) -> EvalReport:
    """RMSE of holding each forecast's initial truth state, keyed like :func:`evaluate_forecasts`."""
    held = []
    for fc in forecasts:
        init = truth.pollutants[truth.time_index(_init_time(fc))]
        pollutants = np.broadcast_to(np.asarray(init), (len(fc),) + init.shape)
        held.append(GridPack(
            truth.grid, truth.catalog, fc.times, pollutants,
            np.broadcast_to(np.float32(0), (len(fc),) + truth.meteorology.shape[1:]), truth.statics,
            attrs={**fc.attrs, "init_time": format_time(_init_time(fc))},
        ))
    return evaluate_forecasts(held, truth, variables)


def row_label(name, pressure_levels):
    base, _, tail = name.rpartition("_")
    if base and tail.isdigit() and int(tail) in pressure_levels:
        return f"{base}@{tail}"
    return name


@dataclasses.dataclass
class Scorecard:
    rows: list[str]
    days: list[int]
    cells: np.ndarray  # rows x days, NaN where missing
    better_fraction: dict  # day -> fraction of rows with score < 1

    def summary_lines(self) -> list[str]:
        return [f"day {d}: {100 * f:.0f}% of variables better than baseline" for d, f in self.better_fraction.items()]


def scorecard(report: EvalReport, out_csv=None, png=None) -> Scorecard:
    """Normalized RMSE per variable@level and lead day (mean over the day's leads).

    Writes ``out_csv`` and ``<stem>_summary.csv``; a heat map if ``png`` is given.
    """
    ratios = report.normalized
    if ratios is None:
        raise ValueError("report has no baseline; normalized RMSE unavailable")
    days = sorted({max(1, math.ceil(h / 24)) for h in report.lead_hours})
    rows = [row_label(v, report.pressure_levels) for v in report.variables]
    cells = np.full((len(rows), len(days)), np.nan)
    for j, day in enumerate(days):
        cols = [k for k, h in enumerate(report.lead_hours) if max(1, math.ceil(h / 24)) == day]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            cells[:, j] = np.nanmean(ratios[:, cols], axis=1)
    missing = int(np.isnan(cells).sum())
    if missing:
        warnings.warn(f"{missing} scorecard cells missing; written empty", stacklevel=2)
    better = {}
    for j, day in enumerate(days):
        col = cells[:, j]
        valid = col[~np.isnan(col)]
        better[day] = float((valid < 1).mean()) if valid.size else float("nan")
    card = Scorecard(rows, days, cells, better)
    if out_csv is not None:
        write_scorecard(card, out_csv)
    if png is not None:
        render_scorecard(card, png)
    return card


def write_scorecard(card: Scorecard, path):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["variable"] + [f"day{d}" for d in card.days])
        for label, row in zip(card.rows, card.cells):
            writer.writerow([label] + ["" if np.isnan(v) else repr(float(v)) for v in row])
    with open(path.with_name(path.stem + "_summary.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["day", "better_fraction"])
        for day, frac in card.better_fraction.items():
            writer.writerow([day, repr(frac)])


def read_scorecard(path) -> tuple[list[str], list[int], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        days = [int(h[3:]) for h in header[1:]]
        rows, cells = [], []
        for rec in reader:
            rows.append(rec[0])
            cells.append([float(v) if v != "" else np.nan for v in rec[1:]])
    return rows, days, np.array(cells, dtype=float).reshape(len(rows), len(days))


def render_scorecard(card: Scorecard, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.2 + 0.6 * len(card.days), 0.8 + 0.25 * len(card.rows)))
    # red = better than the baseline
    im = ax.imshow(card.cells, cmap="RdBu", vmin=0.5, vmax=1.5, aspect="auto")
    ax.set_xticks(range(len(card.days)), [f"day {d}" for d in card.days])
    ax.set_yticks(range(len(card.rows)), card.rows, fontsize=7)
    fig.colorbar(im, ax=ax, label="normalized RMSE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _bbox_index(grid: GridSpec, bbox):
    lat_min, lat_max, lon_min, lon_max = bbox
    lat = grid.latitudes()
    lon = grid.longitudes()
    rows = np.flatnonzero((lat >= lat_min) & (lat <= lat_max))
    lon_min, lon_max = lon_min % 360.0, lon_max % 360.0 if lon_max != 360.0 else 360.0
    if lon_min <= lon_max:
        cols = np.flatnonzero((lon >= lon_min) & (lon <= lon_max))
    else:
        cols = np.concatenate([np.flatnonzero(lon >= lon_min), np.flatnonzero(lon <= lon_max)])
    if rows.size == 0 or cols.size == 0:
        raise ValueError(f"bounding box {bbox} selects no grid cells")
    return rows, cols


def export_map(field, grid: GridSpec, bbox, out_path, image_path=None, vmin=None, vmax=None):
    """Write the sub-grid inside ``bbox = (lat_min, lat_max, lon_min, lon_max)`` as CSV.

    ``lon_min > lon_max`` wraps through 0 deg. Returns the sub-grid.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.shape != grid.shape:
        raise ShapeError(f"field {field.shape} vs grid {grid.shape}")
    rows, cols = _bbox_index(grid, bbox)
    sub = field[np.ix_(rows, cols)]
    lat = grid.latitudes()[rows]
    lon = grid.longitudes()[cols]
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["lat\\lon"] + [repr(float(x)) for x in lon])
        for la, row in zip(lat, sub):
            writer.writerow([repr(float(la))] + [repr(float(v)) for v in row])
    if image_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        im = ax.imshow(sub, cmap="viridis", vmin=vmin, vmax=vmax, aspect="auto")
        ax.set_xticks([0, len(lon) - 1], [f"{lon[0]:g}E", f"{lon[-1]:g}E"])
        ax.set_yticks([0, len(lat) - 1], [f"{lat[0]:g}", f"{lat[-1]:g}"])
        fig.colorbar(im, ax=ax)
        fig.savefig(image_path, dpi=120)
        plt.close(fig)
    return sub
