"""Evaluation: masked error metrics, UQ summaries, ranking, extrapolation.

Grid-valued UQ scores are reduced the same way throughout: per-cell mean
over the days a cell is masked, then max/min/average across covered
cells. Point-error metrics pool squared errors over every masked
pixel-day first and aggregate across seeds second, so per-seed values
and their exact population mean/variance are both reported.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import GridSample, RegionSpec, split, standardize
from .errors import ContractError
from .model import HEAD_GAUSSIAN, UNetParams, predict_quantiles
from .train import (TRAIN_FRAC, RunRecord, TrainConfig, UQ_CQR, UQ_MCD, load_run_params,
                    read_run_config, read_runs_log)
from .uq import CqrPrediction, McdPrediction, cqr_predict, mc_dropout_predict

EVAL_RNG_TAG = 11


def masked_rmse(pred: np.ndarray, y: np.ndarray, mask: np.ndarray) -> float:
    """Root mean squared error over masked pixels, float64 accumulation."""
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ContractError(f"masked_rmse: mask must be boolean, got {mask.dtype}")
    if pred.shape != y.shape or mask.shape != y.shape:
        raise ContractError(
            f"masked_rmse: shapes differ: pred {pred.shape}, y {y.shape}, mask {mask.shape}")
    if not mask.any():
        raise ContractError("masked_rmse: mask selects no pixels")
    diff = pred[mask].astype(np.float64) - y[mask].astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def pooled_rmse(preds: Sequence[np.ndarray], samples: Sequence[GridSample]) -> float:
    """RMSE over the masked pixels of all days pooled together."""
    if len(preds) != len(samples) or not samples:
        raise ContractError("pooled_rmse: need matching, nonempty prediction/sample lists")
    total = 0.0
    count = 0
    for pred, s in zip(preds, samples):
        diff = pred[s.mask].astype(np.float64) - s.y[s.mask].astype(np.float64)
        total += float(np.sum(diff * diff))
        count += diff.size
    if count == 0:
        raise ContractError("pooled_rmse: no masked pixels in any sample")
    return math.sqrt(total / count)


def time_mean_over_masked(grids: Sequence[np.ndarray],
                          masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell mean over the days each cell is masked.

    Returns (mean grid with NaN at never-covered cells, coverage mask).
    Invariant to the order of days.
    """
    if len(grids) != len(masks) or not grids:
        raise ContractError("time_mean_over_masked: need matching, nonempty lists")
    acc = np.zeros(grids[0].shape, dtype=np.float64)
    cnt = np.zeros(grids[0].shape, dtype=np.int64)
    for g, m in zip(grids, masks):
        m = np.asarray(m, dtype=bool)
        acc[m] += g[m].astype(np.float64)
        cnt[m] += 1
    covered = cnt > 0
    mean = np.full(acc.shape, np.nan)
    mean[covered] = acc[covered] / cnt[covered]
    return mean, covered


def _grid_extremes(mean_grid: np.ndarray, covered: np.ndarray) -> tuple[float, float, float]:
    if not covered.any():
        raise ContractError("statistics need at least one covered cell")
    vals = mean_grid[covered]
    return float(vals.max()), float(vals.min()), float(vals.mean())


def interval_stats(preds: Sequence[CqrPrediction],
                   masks: Sequence[np.ndarray]) -> tuple[float, float, float]:
    """(max, min, avg) of per-cell time-mean conformal interval length, ppb."""
    mean, covered = time_mean_over_masked([p.interval_length for p in preds], masks)
    return _grid_extremes(mean, covered)


def epistemic_stats(preds: Sequence[McdPrediction],
                    masks: Sequence[np.ndarray]) -> tuple[float, float, float]:
    """(max, min, avg) of per-cell time-mean epistemic variance, ppb^2."""
    mean, covered = time_mean_over_masked([p.epistemic for p in preds], masks)
    return _grid_extremes(mean, covered)


def empirical_coverage(preds: Sequence[CqrPrediction],
                       samples: Sequence[GridSample]) -> float:
    """Fraction of masked pixel-days with lo <= y <= hi."""
    if len(preds) != len(samples) or not samples:
        raise ContractError("empirical_coverage: need matching, nonempty lists")
    hits = 0
    total = 0
    for p, s in zip(preds, samples):
        y = s.y[s.mask]
        hits += int(np.sum((p.lo[s.mask] <= y) & (y <= p.hi[s.mask])))
        total += y.size
    if total == 0:
        raise ContractError("empirical_coverage: no masked pixels")
    return hits / total


def quantile_crossing_rate(params: UNetParams, samples: Sequence[GridSample]) -> float:
    """Fraction of masked pixel-days where the raw head has q_lo > q_hi.

    Measured before conformal widening, on already-standardized inputs.
    """
    crossed = 0
    total = 0
    for s in samples:
        quantiles = predict_quantiles(params, s.x)
        lo, hi = quantiles[0], quantiles[-1]
        crossed += int(np.sum(lo[s.mask] > hi[s.mask]))
        total += int(s.mask.sum())
    if total == 0:
        raise ContractError("quantile_crossing_rate: no masked pixels")
    return crossed / total


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class MetricsReport:
    region: str
    uq_method: str
    n_channels: int
    n_seeds: int
    rmse_per_seed: tuple[float, ...]
    rmse_mean: float
    rmse_variance: float
    rmse_std: float
    interval_max: float | None = None
    interval_min: float | None = None
    interval_avg: float | None = None
    epistemic_max: float | None = None
    epistemic_min: float | None = None
    epistemic_avg: float | None = None
    coverage: float | None = None
    crossing_rate: float | None = None


def _population_stats(values: Sequence[float]) -> tuple[float, float, float]:
    mean = sum(values) / len(values)
    variance = sum((v - mean) ** 2 for v in values) / len(values)
    return mean, variance, math.sqrt(variance)


def _seed_val_split(samples: list[GridSample], config: TrainConfig, seed: int) -> list[GridSample]:
    if config.uq_method == UQ_CQR:
        _, _, val_set = split(samples, TRAIN_FRAC, calib=True, seed=seed)
    else:
        _, val_set = split(samples, TRAIN_FRAC, calib=False, seed=seed)
    return sorted(val_set, key=lambda s: s.date)


def _check_channels(samples: list[GridSample], in_channels: int) -> None:
    if samples[0].x.shape[0] != in_channels:
        raise ContractError(
            f"dataset has {samples[0].x.shape[0]} channels but runs were trained with {in_channels}")


def evaluate_runs(samples: list[GridSample], spec: RegionSpec, runs_dir) -> MetricsReport:
    """Score every seed of a runs directory on its own held-out days.

    The split is recomputed from each record's seed, so the dataset must
    be the one the runs were trained on.
    """
    config, in_channels = read_run_config(runs_dir)
    records = read_runs_log(runs_dir)
    if not records:
        raise ContractError(f"{runs_dir}: runs.log has no completed seeds")
    _check_channels(samples, in_channels)

    rmses = []
    triples = []
    coverages = []
    crossings = []
    for rec in records:
        params, stats = load_run_params(runs_dir, rec)
        val_set = _seed_val_split(samples, config, rec.seed)
        val_std = standardize(val_set, stats)
        masks = [s.mask for s in val_set]
        if config.uq_method == UQ_MCD:
            rng = np.random.default_rng([rec.seed, EVAL_RNG_TAG])
            preds = [mc_dropout_predict(params, s.x, config.t_passes, rng) for s in val_std]
            rmses.append(pooled_rmse([p.mean for p in preds], val_set))
            triples.append(epistemic_stats(preds, masks))
        else:
            if rec.qhat is None:
                raise ContractError(f"seed {rec.seed}: CQR record has no qhat")
            preds = [cqr_predict(params, s.x, rec.qhat, config.alpha) for s in val_std]
            rmses.append(pooled_rmse([p.mid for p in preds], val_set))
            triples.append(interval_stats(preds, masks))
            coverages.append(empirical_coverage(preds, val_set))
            crossings.append(quantile_crossing_rate(params, val_std))

    mean, variance, std = _population_stats(rmses)
    triple_mean = tuple(float(np.mean([t[i] for t in triples])) for i in range(3))
    kwargs = dict(
        region=spec.name, uq_method=config.uq_method, n_channels=in_channels,
        n_seeds=len(records), rmse_per_seed=tuple(rmses), rmse_mean=mean,
        rmse_variance=variance, rmse_std=std)
    if config.uq_method == UQ_MCD:
        kwargs.update(epistemic_max=triple_mean[0], epistemic_min=triple_mean[1],
                      epistemic_avg=triple_mean[2])
    else:
        kwargs.update(interval_max=triple_mean[0], interval_min=triple_mean[1],
                      interval_avg=triple_mean[2],
                      coverage=float(np.mean(coverages)),
                      crossing_rate=float(np.mean(crossings)))
    return MetricsReport(**kwargs)


# ---------------------------------------------------------------------------
# station ranking


@dataclass(frozen=True)
class StationScore:
    row: int
    col: int
    lat: float
    lon: float
    uq_score: float
    rmse: float


def rank_stations(uq_grid: np.ndarray, rmse_grid: np.ndarray, mask: np.ndarray,
                  spec: RegionSpec) -> list[StationScore]:
    """Masked cells sorted by mean UQ score, descending; ties break on
    (row, col) ascending so the order is fully reproducible."""
    mask = np.asarray(mask, dtype=bool)
    if uq_grid.shape != (spec.h, spec.w) or mask.shape != (spec.h, spec.w):
        raise ContractError(
            f"rank_stations: grids {uq_grid.shape} must match region {(spec.h, spec.w)}")
    if not mask.any():
        raise ContractError("rank_stations: no masked cells to rank")
    rows = []
    for r, c in np.argwhere(mask):
        lat, lon = spec.cell_center(int(r), int(c))
        rows.append(StationScore(row=int(r), col=int(c), lat=lat, lon=lon,
                                 uq_score=float(uq_grid[r, c]), rmse=float(rmse_grid[r, c])))
    return sorted(rows, key=lambda s: (-s.uq_score, s.row, s.col))


def _per_seed_uq_and_errors(samples, config: TrainConfig, rec: RunRecord, params, stats):
    """One seed's val-split UQ grids, point predictions and samples."""
    val_set = _seed_val_split(samples, config, rec.seed)
    val_std = standardize(val_set, stats)
    if config.uq_method == UQ_MCD:
        rng = np.random.default_rng([rec.seed, EVAL_RNG_TAG])
        preds = [mc_dropout_predict(params, s.x, config.t_passes, rng) for s in val_std]
        uq_grids = [p.epistemic for p in preds]
        points = [p.mean for p in preds]
    else:
        preds = [cqr_predict(params, s.x, rec.qhat, config.alpha) for s in val_std]
        uq_grids = [p.interval_length for p in preds]
        points = [p.mid for p in preds]
    return val_set, uq_grids, points


def rank_for_runs(samples: list[GridSample], spec: RegionSpec, runs_dir) -> list[StationScore]:
    """Aggregate UQ score and RMSE per station cell across all seeds, ranked.

    The UQ score is the CQR interval length or the MCD epistemic
    variance, time-averaged per cell and then averaged over seeds.
    """
    config, in_channels = read_run_config(runs_dir)
    records = read_runs_log(runs_dir)
    if not records:
        raise ContractError(f"{runs_dir}: runs.log has no completed seeds")
    _check_channels(samples, in_channels)
    seed_means = []
    covered_any = None
    sq_sum = np.zeros((spec.h, spec.w), dtype=np.float64)
    sq_cnt = np.zeros((spec.h, spec.w), dtype=np.int64)
    for rec in records:
        params, stats = load_run_params(runs_dir, rec)
        val_set, uq_grids, points = _per_seed_uq_and_errors(samples, config, rec, params, stats)
        mean, covered = time_mean_over_masked(uq_grids, [s.mask for s in val_set])
        seed_means.append(mean)
        covered_any = covered if covered_any is None else (covered_any | covered)
        for point, s in zip(points, val_set):
            diff = (point.astype(np.float64) - np.where(s.mask, s.y, 0).astype(np.float64)) ** 2
            sq_sum[s.mask] += diff[s.mask]
            sq_cnt[s.mask] += 1
    stacked = np.stack(seed_means)
    present = ~np.isnan(stacked)
    uq_mean = np.full((spec.h, spec.w), np.nan)
    n_present = present.sum(axis=0)
    uq_mean[n_present > 0] = (np.where(present, stacked, 0.0).sum(axis=0)[n_present > 0]
                              / n_present[n_present > 0])
    rmse_grid = np.full((spec.h, spec.w), np.nan)
    have = sq_cnt > 0
    rmse_grid[have] = np.sqrt(sq_sum[have] / sq_cnt[have])
    return rank_stations(uq_mean, rmse_grid, covered_any & have, spec)


# ---------------------------------------------------------------------------
# time series and extrapolation


def _normal_quantile(p: float) -> float:
    """Inverse standard normal CDF by bisection on erf; deterministic."""
    if not 0.0 < p < 1.0:
        raise ContractError(f"quantile level must be in (0, 1), got {p}")
    lo, hi = -12.0, 12.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class SeriesRow:
    date: datetime.date
    y: float
    mid: float
    lo: float
    hi: float


def series_for_runs(samples: list[GridSample], spec: RegionSpec, runs_dir,
                    lat: float, lon: float) -> tuple[tuple[int, int], list[SeriesRow]]:
    """Observed vs predicted band at one station cell over held-out days.

    Uses the first configured seed. CQR rows carry the conformal band;
    MCD rows carry the central (1 - alpha) Gaussian band from the total
    predictive variance.
    """
    config, in_channels = read_run_config(runs_dir)
    records = read_runs_log(runs_dir)
    if not records:
        raise ContractError(f"{runs_dir}: runs.log has no completed seeds")
    _check_channels(samples, in_channels)
    row, col = spec.nearest_cell(lat, lon)
    rec = records[0]
    params, stats = load_run_params(runs_dir, rec)
    val_set = _seed_val_split(samples, config, rec.seed)
    val_std = standardize(val_set, stats)
    z = _normal_quantile(1.0 - config.alpha / 2.0)
    rows = []
    rng = np.random.default_rng([rec.seed, EVAL_RNG_TAG])
    for s_raw, s in zip(val_set, val_std):
        if not s_raw.mask[row, col]:
            continue
        if config.uq_method == UQ_MCD:
            pred = mc_dropout_predict(params, s.x, config.t_passes, rng)
            half = z * math.sqrt(float(pred.total_variance[row, col]))
            mid = float(pred.mean[row, col])
            lo, hi = mid - half, mid + half
        else:
            pred = cqr_predict(params, s.x, rec.qhat, config.alpha)
            mid = float(pred.mid[row, col])
            lo, hi = float(pred.lo[row, col]), float(pred.hi[row, col])
        rows.append(SeriesRow(date=s_raw.date, y=float(s_raw.y[row, col]),
                              mid=mid, lo=lo, hi=hi))
    return (row, col), rows


def extrapolate(params: UNetParams, samples_std: list[GridSample], day_indices: Sequence[int],
                *, qhat: float | None = None, t_passes: int | None = None,
                rng: np.random.Generator | None = None, alpha: float = 0.1):
    """Full-grid UQ maps for 1-based day indices into a standardized sample list.

    Every cell gets a value; no station mask is applied. Quantile-head
    models produce the conformal interval length, Gaussian-head models
    the epistemic variance. Masked cells carry exactly the values the
    standard evaluation path sees, because it is the same forward pass.
    """
    out = []
    for d in day_indices:
        if not 1 <= d <= len(samples_std):
            raise ContractError(
                f"day index {d} out of range, valid indices are 1..{len(samples_std)}")
        s = samples_std[d - 1]
        if params.config.head == HEAD_GAUSSIAN:
            if t_passes is None or rng is None:
                raise ContractError("extrapolate: Gaussian head needs t_passes and rng")
            grid = mc_dropout_predict(params, s.x, t_passes, rng).epistemic
        else:
            if qhat is None:
                raise ContractError("extrapolate: quantile head needs qhat")
            grid = cqr_predict(params, s.x, qhat, alpha).interval_length
        if not np.all(np.isfinite(grid)):
            raise ContractError(f"extrapolate: non-finite UQ values on day {d}")
        out.append((d, s.date, grid))
    return out


def extrapolate_for_runs(samples: list[GridSample], spec: RegionSpec, runs_dir,
                         day_indices: Sequence[int]):
    """Extrapolation maps for the first seed's held-out days."""
    config, in_channels = read_run_config(runs_dir)
    records = read_runs_log(runs_dir)
    if not records:
        raise ContractError(f"{runs_dir}: runs.log has no completed seeds")
    _check_channels(samples, in_channels)
    rec = records[0]
    params, stats = load_run_params(runs_dir, rec)
    val_std = standardize(_seed_val_split(samples, config, rec.seed), stats)
    if config.uq_method == UQ_MCD:
        rng = np.random.default_rng([rec.seed, EVAL_RNG_TAG])
        return extrapolate(params, val_std, day_indices, t_passes=config.t_passes, rng=rng,
                           alpha=config.alpha)
    return extrapolate(params, val_std, day_indices, qhat=rec.qhat, alpha=config.alpha)
