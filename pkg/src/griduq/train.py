"""Multi-seed training orchestration and the runs directory layout.

A runs directory holds one ``config.txt`` (key=value), one ``runs.log``
line per completed seed, and per seed: the best-validation checkpoint,
the final-epoch checkpoint, and the channel statistics used to
standardize inputs (all GUQW files). Everything a later evaluation needs
to rebuild the model and reproduce the split lives in those files.

Training is bitwise deterministic for a fixed seed: the day shuffle is
reseeded per (seed, epoch), the dropout stream is seeded per run, and
all reductions run in a fixed order.
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ChannelStats, GridSample, split, standardize
from .errors import ContractError, FormatError, TrainingError
from .losses import gaussian_nll, quantile_loss
from .model import (HEAD_GAUSSIAN, HEAD_QUANTILE, DEFAULT_TAUS, ModelConfig, UNetParams,
                    build, forward, gaussian_moments)
from .uq import cqr_calibrate

UQ_MCD = "mcd"
UQ_CQR = "cqr"

TRAIN_FRAC = 0.9
GRAD_CLIP_NORM = 5.0
CONFIG_NAME = "config.txt"
RUNS_LOG_NAME = "runs.log"
THREADS_ENV = "GRIDUQ_THREADS"


@dataclass(frozen=True)
class TrainConfig:
    uq_method: str
    epochs: int = 200
    lr: float = 1e-3
    dropout_rate: float = 0.1
    batch_size: int = 8
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    alpha: float = 0.1
    t_passes: int = 30
    base_width: int = 32
    depth: int = 3

    def __post_init__(self):
        if self.uq_method not in (UQ_MCD, UQ_CQR):
            raise ContractError(f"uq_method must be '{UQ_MCD}' or '{UQ_CQR}'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not self.seeds:
            raise ContractError("at least one seed is required")
        if not 0.0 < self.alpha < 1.0:
            raise ContractError(f"alpha must be in (0, 1), got {self.alpha}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def model_config(self, in_channels: int) -> ModelConfig:
        head = HEAD_GAUSSIAN if self.uq_method == UQ_MCD else HEAD_QUANTILE
        return ModelConfig(in_channels=in_channels, base_width=self.base_width,
                           depth=self.depth, dropout_rate=self.dropout_rate, head=head)


@dataclass
class RunRecord:
    seed: int
    best_val_loss: float
    best_epoch: int
    final_train_loss: float
    qhat: float | None
    checkpoint: str        # runs-dir relative paths
    final_checkpoint: str
    stats: str
    wall_time_s: float

    def to_line(self) -> str:
        qhat = "none" if self.qhat is None else repr(self.qhat)
        return (f"seed={self.seed} best_val_loss={self.best_val_loss!r} "
                f"best_epoch={self.best_epoch} final_train_loss={self.final_train_loss!r} "
                f"qhat={qhat} checkpoint={self.checkpoint} final_checkpoint={self.final_checkpoint} "
                f"stats={self.stats} wall_time_s={self.wall_time_s:.3f}")

    @classmethod
    def from_line(cls, line: str) -> "RunRecord":
        fields = dict(part.split("=", 1) for part in line.split())
        try:
            return cls(
                seed=int(fields["seed"]),
                best_val_loss=float(fields["best_val_loss"]),
                best_epoch=int(fields["best_epoch"]),
                final_train_loss=float(fields["final_train_loss"]),
                qhat=None if fields["qhat"] == "none" else float(fields["qhat"]),
                checkpoint=fields["checkpoint"],
                final_checkpoint=fields["final_checkpoint"],
                stats=fields["stats"],
                wall_time_s=float(fields["wall_time_s"]))
        except KeyError as err:
            raise FormatError(f"runs.log line missing key {err}: {line!r}") from err


def resolve_workers(n_tasks: int, deterministic: bool = False) -> int:
    """Worker count for seed-level parallelism, capped by GRIDUQ_THREADS."""
    if deterministic or n_tasks <= 1:
        return 1
    cap = os.environ.get(THREADS_ENV)
    if cap is not None:
        try:
            cap_n = int(cap)
        except ValueError:
            raise ContractError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
        if cap_n < 1:
            raise ContractError(f"{THREADS_ENV} must be >= 1, got {cap_n}")
        return min(n_tasks, cap_n)
    return min(n_tasks, os.cpu_count() or 1)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = np.float32(max_norm / norm)
        for t in params.values():
            if t.grad is not None:
                t.grad *= factor
    return norm


def _batch_arrays(samples: Sequence[GridSample]):
    xb = np.stack([s.x for s in samples])
    yb = np.stack([s.y for s in samples])[:, None]
    maskb = np.stack([s.mask for s in samples])[:, None]
    return xb, yb, maskb


def _batch_loss(params: UNetParams, xb, yb, maskb, dropout_active: bool,
                rng: np.random.Generator | None) -> Tensor:
    out = forward(params, Tensor(xb), dropout_active=dropout_active, rng=rng)
    if params.config.head == HEAD_GAUSSIAN:
        mu, sigma2 = gaussian_moments(out)
        return gaussian_nll(mu, sigma2, yb, maskb)
    return quantile_loss(out, yb, params.config.taus, maskb)


def _pooled_loss(params: UNetParams, samples: Sequence[GridSample], batch_size: int) -> float:
    """Deterministic mask-pixel-weighted loss over a sample list, dropout off."""
    total = 0.0
    count = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        xb, yb, maskb = _batch_arrays(chunk)
        n = int(maskb.sum())
        loss = _batch_loss(params, xb, yb, maskb, dropout_active=False, rng=None)
        total += loss.item() * n
        count += n
    return total / count


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_val_loss: float
    best_epoch: int
    final_train_loss: float


def fit(params: UNetParams, train_samples: list[GridSample], val_samples: list[GridSample],
        *, epochs: int, lr: float, batch_size: int, seed: int,
        grad_clip: float = GRAD_CLIP_NORM) -> FitResult:
    """Adam training loop with best-validation snapshotting.

    Aborts with the (epoch, batch) position if a loss goes non-finite.
    Epochs and batches are numbered from 1 in records and messages.
    """
    usable = [s for s in train_samples if s.mask.any()]
    if len(usable) < len(train_samples):
        warnings.warn(f"dropped {len(train_samples) - len(usable)} training days with no stations",
                      RuntimeWarning, stacklevel=2)
    if not usable:
        raise ContractError("fit: no training samples with station coverage")
    if not val_samples:
        raise ContractError("fit: validation set is empty")
    params.require_grad(True)
    state = ad.AdamState(params.tensors)
    drop_rng = np.random.default_rng([seed, 7])
    best_val = float("inf")
    best_epoch = 0
    best_state = {name: t.data.copy() for name, t in params.tensors.items()}
    final_train = float("nan")

    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(usable))
        epoch_total = 0.0
        epoch_count = 0
        for bi, start in enumerate(range(0, len(usable), batch_size), start=1):
            chunk = [usable[i] for i in order[start:start + batch_size]]
            xb, yb, maskb = _batch_arrays(chunk)
            tape = ad.Tape()
            with tape:
                loss = _batch_loss(params, xb, yb, maskb, dropout_active=True, rng=drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {bi}")
            ad.zero_grads(params.tensors)
            ad.backward(tape, loss)
            clip_grad_norm(params.tensors, grad_clip)
            ad.adam_step(params.tensors, state, lr=lr)
            n = int(maskb.sum())
            epoch_total += value * n
            epoch_count += n
        final_train = epoch_total / epoch_count
        val_loss = _pooled_loss(params, val_samples, batch_size)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss after epoch {epoch}")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = {name: t.data.copy() for name, t in params.tensors.items()}
    return FitResult(best_state=best_state, best_val_loss=best_val,
                     best_epoch=best_epoch, final_train_loss=final_train)


def _params_from_state(config: ModelConfig, state: dict[str, np.ndarray]) -> UNetParams:
    return UNetParams(config, {name: Tensor(arr) for name, arr in state.items()})


def train_one(config: TrainConfig, samples: list[GridSample], seed: int,
              out_dir) -> RunRecord:
    """Train a single seed end to end and write its artifacts into out_dir.

    MCD runs split 90/10; CQR runs halve the 90% into train/calibration
    and compute the global qhat from the best-validation weights.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    in_channels = samples[0].x.shape[0]
    model_config = config.model_config(in_channels)

    if config.uq_method == UQ_CQR:
        train_set, calib_set, val_set = split(samples, TRAIN_FRAC, calib=True, seed=seed)
    else:
        train_set, val_set = split(samples, TRAIN_FRAC, calib=False, seed=seed)
        calib_set = None
    stats = ChannelStats.from_samples(train_set)
    train_set = standardize(train_set, stats)
    val_set = standardize(val_set, stats)

    params = build(model_config, seed)
    started = time.perf_counter()
    result = fit(params, train_set, val_set, epochs=config.epochs, lr=config.lr,
                 batch_size=config.batch_size, seed=seed)
    wall = time.perf_counter() - started

    best_name = f"seed{seed}_best.guqw"
    final_name = f"seed{seed}_final.guqw"
    stats_name = f"seed{seed}_stats.guqw"
    best_params = _params_from_state(model_config, result.best_state)
    ad.save_checkpoint(out / best_name, best_params.tensors)
    ad.save_checkpoint(out / final_name, params.tensors)
    ad.save_checkpoint(out / stats_name, {"mean": Tensor(stats.mean), "std": Tensor(stats.std)})

    qhat = None
    if config.uq_method == UQ_CQR:
        qhat = cqr_calibrate(best_params, standardize(calib_set, stats), config.alpha)

    return RunRecord(seed=seed, best_val_loss=result.best_val_loss,
                     best_epoch=result.best_epoch, final_train_loss=result.final_train_loss,
                     qhat=qhat, checkpoint=best_name, final_checkpoint=final_name,
                     stats=stats_name, wall_time_s=wall)


def train_all_seeds(config: TrainConfig, samples: list[GridSample], out_dir,
                    deterministic: bool = False):
    """Train every configured seed, optionally in parallel.

    Returns (records, aggregate, failures). Failed seeds are reported,
    not raised, so partial results stay on disk; the aggregate covers the
    seeds that finished. The aggregate is the exact population mean and
    variance of the best validation losses.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    in_channels = samples[0].x.shape[0]
    write_run_config(out, config, in_channels)

    workers = resolve_workers(len(config.seeds), deterministic)
    records: dict[int, RunRecord] = {}
    failures: list[tuple[int, str]] = []
    if workers == 1:
        for seed in config.seeds:
            try:
                records[seed] = train_one(config, samples, seed, out)
            except Exception as err:  # noqa: BLE001 - seed isolation is the point
                failures.append((seed, f"{type(err).__name__}: {err}"))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {seed: pool.submit(train_one, config, samples, seed, out)
                       for seed in config.seeds}
            for seed, fut in futures.items():
                try:
                    records[seed] = fut.result()
                except Exception as err:  # noqa: BLE001
                    failures.append((seed, f"{type(err).__name__}: {err}"))

    ordered = [records[s] for s in config.seeds if s in records]
    with open(out / RUNS_LOG_NAME, "w") as fh:
        for rec in ordered:
            fh.write(rec.to_line() + "\n")
    aggregate = aggregate_seed_losses([r.best_val_loss for r in ordered])
    return ordered, aggregate, failures


def aggregate_seed_losses(values: Sequence[float]) -> dict[str, float]:
    """Exact population mean/variance of per-seed validation losses."""
    if not values:
        return {"n_seeds": 0, "val_loss_mean": float("nan"), "val_loss_variance": float("nan")}
    mean = sum(values) / len(values)
    variance = sum((v - mean) ** 2 for v in values) / len(values)
    return {"n_seeds": len(values), "val_loss_mean": mean, "val_loss_variance": variance}


# ---------------------------------------------------------------------------
# runs directory persistence


def write_run_config(out_dir, config: TrainConfig, in_channels: int) -> None:
    lines = [
        f"uq_method={config.uq_method}",
        f"in_channels={in_channels}",
        f"base_width={config.base_width}",
        f"depth={config.depth}",
        f"dropout_rate={config.dropout_rate!r}",
        f"epochs={config.epochs}",
        f"lr={config.lr!r}",
        f"batch_size={config.batch_size}",
        f"alpha={config.alpha!r}",
        f"t_passes={config.t_passes}",
        f"seeds={','.join(str(s) for s in config.seeds)}",
        f"taus={','.join(repr(t) for t in DEFAULT_TAUS)}",
    ]
    (Path(out_dir) / CONFIG_NAME).write_text("\n".join(lines) + "\n")


def read_run_config(runs_dir) -> tuple[TrainConfig, int]:
    """Rebuild the TrainConfig and input channel count from config.txt."""
    fp = Path(runs_dir) / CONFIG_NAME
    if not fp.is_file():
        raise FormatError(f"{runs_dir}: missing {CONFIG_NAME}")
    fields: dict[str, str] = {}
    for line in fp.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    try:
        config = TrainConfig(
            uq_method=fields["uq_method"],
            epochs=int(fields["epochs"]),
            lr=float(fields["lr"]),
            dropout_rate=float(fields["dropout_rate"]),
            batch_size=int(fields["batch_size"]),
            seeds=tuple(int(s) for s in fields["seeds"].split(",")),
            alpha=float(fields["alpha"]),
            t_passes=int(fields["t_passes"]),
            base_width=int(fields["base_width"]),
            depth=int(fields["depth"]))
        in_channels = int(fields["in_channels"])
    except (KeyError, ValueError) as err:
        raise FormatError(f"{fp}: missing or malformed key: {err}") from err
    return config, in_channels


def read_runs_log(runs_dir) -> list[RunRecord]:
    fp = Path(runs_dir) / RUNS_LOG_NAME
    if not fp.is_file():
        raise FormatError(f"{runs_dir}: missing {RUNS_LOG_NAME}")
    return [RunRecord.from_line(line) for line in fp.read_text().splitlines() if line.strip()]


def load_run_params(runs_dir, record: RunRecord) -> tuple[UNetParams, ChannelStats]:
    """Rebuild a trained model and its input statistics from a runs directory."""
    config, in_channels = read_run_config(runs_dir)
    model_config = config.model_config(in_channels)
    tensors = ad.load_checkpoint(Path(runs_dir) / record.checkpoint)
    stats_tensors = ad.load_checkpoint(Path(runs_dir) / record.stats)
    if set(stats_tensors) != {"mean", "std"}:
        raise FormatError(f"{record.stats}: expected tensors 'mean' and 'std'")
    stats = ChannelStats(mean=stats_tensors["mean"].data, std=stats_tensors["std"].data)
    return UNetParams(model_config, tensors), stats
