"""Two uncertainty backends over the same trunk.

MC-dropout: T stochastic forward passes of a Gaussian-head model with
dropout left on. The predictive mean is the average of the per-pass
means, epistemic variance is the population variance of those means,
and aleatoric variance is the average predicted sigma^2. All three are
full grids; total variance = epistemic + aleatoric.

Split-conformal CQR: conformity scores E = max(q_lo - y, y - q_hi) are
pooled over every masked pixel of the calibration days into one global
qhat, the ceil((n+1)(1-alpha))-th smallest score. Prediction widens the
raw quantile band symmetrically: [q_lo - qhat, q_hi + qhat]. The
marginal coverage guarantee needs nothing from the model but
exchangeability of calibration and test days.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import GridSample
from .errors import CalibrationError, ContractError
from .model import HEAD_GAUSSIAN, HEAD_QUANTILE, UNetParams, predict_gaussian, predict_quantiles

DEFAULT_ALPHA = 0.1
DEFAULT_PASSES = 30


@dataclass(frozen=True)
class McdPrediction:
    """MC-dropout output grids for one input; variances in ppb^2."""

    mean: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    passes: int

    @property
    def total_variance(self) -> np.ndarray:
        return self.epistemic + self.aleatoric


@dataclass(frozen=True)
class CqrPrediction:
    """Conformalized quantile band for one input; lengths in ppb."""

    lo: np.ndarray
    mid: np.ndarray
    hi: np.ndarray
    qhat: float
    alpha: float

    @property
    def interval_length(self) -> np.ndarray:
        return self.hi - self.lo


def aggregate_mc_passes(mus: Sequence[np.ndarray],
                        sigma2s: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reduce per-pass (mu, sigma^2) grids to (mean, epistemic, aleatoric).

    Float64 two-pass arithmetic: when every pass is bitwise identical the
    epistemic variance is exactly zero, not merely tiny.
    """
    if len(mus) != len(sigma2s) or len(mus) < 1:
        raise ContractError("aggregate_mc_passes: need matching, nonempty pass lists")
    t = len(mus)
    mu_stack = np.stack([np.asarray(m, dtype=np.float64) for m in mus])
    s2_stack = np.stack([np.asarray(s, dtype=np.float64) for s in sigma2s])
    mean = mu_stack.sum(axis=0) / t
    epistemic = ((mu_stack - mean) ** 2).sum(axis=0) / t
    aleatoric = s2_stack.sum(axis=0) / t
    return (mean.astype(np.float32), epistemic.astype(np.float32),
            aleatoric.astype(np.float32))


def mc_dropout_predict(params: UNetParams, x: np.ndarray, t_passes: int = DEFAULT_PASSES,
                       rng: np.random.Generator | None = None) -> McdPrediction:
    """T stochastic passes for one (C, H, W) input; reproducible given rng state."""
    if params.config.head != HEAD_GAUSSIAN:
        raise ContractError("mc_dropout_predict needs a Gaussian-head model")
    if t_passes < 2:
        raise ContractError(f"mc_dropout_predict: t_passes must be >= 2, got {t_passes}")
    if rng is None and params.config.dropout_rate > 0.0:
        raise ContractError("mc_dropout_predict: dropout sampling needs a random generator")
    mus, sigma2s = [], []
    for _ in range(t_passes):
        mu, sigma2 = predict_gaussian(params, x, dropout_active=True, rng=rng)
        mus.append(mu)
        sigma2s.append(sigma2)
    mean, epistemic, aleatoric = aggregate_mc_passes(mus, sigma2s)
    return McdPrediction(mean=mean, epistemic=epistemic, aleatoric=aleatoric, passes=t_passes)


def conformal_quantile(scores: np.ndarray, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score (1-indexed order statistic)."""
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"alpha must be in (0, 1), got {alpha}")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.size
    # the 1e-9 slack keeps float products like 100 * 0.9 from ceiling to 91
    k = max(1, math.ceil((n + 1) * (1.0 - alpha) - 1e-9))
    if k > n:
        need = math.ceil(1.0 / alpha - 1e-9) - 1
        raise CalibrationError(
            f"alpha={alpha} needs at least {need} calibration scores, got {n}")
    return float(np.partition(scores, k - 1)[k - 1])


def conformity_scores(params: UNetParams, samples: Sequence[GridSample]) -> np.ndarray:
    """Pooled E = max(q_lo - y, y - q_hi) over every masked pixel of every day."""
    if params.config.head != HEAD_QUANTILE:
        raise ContractError("conformity_scores needs a quantile-head model")
    pooled = []
    for s in samples:
        quantiles = predict_quantiles(params, s.x)
        lo, hi = quantiles[0], quantiles[-1]
        y = s.y[s.mask]
        pooled.append(np.maximum(lo[s.mask] - y, y - hi[s.mask]).astype(np.float64))
    if not pooled:
        raise ContractError("conformity_scores: no calibration samples")
    return np.concatenate(pooled)


def cqr_calibrate(params: UNetParams, calib_set: Sequence[GridSample],
                  alpha: float = DEFAULT_ALPHA) -> float:
    """One global qhat from the pooled calibration scores."""
    return conformal_quantile(conformity_scores(params, calib_set), alpha)


def cqr_predict(params: UNetParams, x: np.ndarray, qhat: float,
                alpha: float = DEFAULT_ALPHA) -> CqrPrediction:
    """Symmetrically widened quantile band; the median passes through untouched."""
    if not math.isfinite(qhat):
        raise ContractError(f"cqr_predict: qhat must be finite, got {qhat}")
    quantiles = predict_quantiles(params, x)
    if len(quantiles) != 3:
        raise ContractError(f"cqr_predict expects a 3-quantile head, got {len(quantiles)} levels")
    lo, mid, hi = quantiles
    q32 = np.float32(qhat)
    return CqrPrediction(lo=lo - q32, mid=mid, hi=hi + q32, qhat=float(qhat), alpha=alpha)
