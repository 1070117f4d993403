"""Gridded samples, their on-disk format, splits, and a synthetic generator.

A dataset is a directory: one ``manifest.txt`` of line-based key=value
pairs (region, h, w, channels, n_days, channel_names, geo anchors) and
one ``YYYY-MM-DD.guq`` file per day. Each day file is

    magic "GUQD" | version u16 | C u16 | H u16 | W u16 |
    C + 2 planes of H*W little-endian float32, row-major:
    the C input channels, the target, and the station mask as 0/1.

Unmasked target pixels carry the quiet-NaN sentinel 0x7FC00000 on disk
and plain NaN in memory; losses and metrics never read them.

Grids are oriented row 0 = northmost row. Cell centers sit half a cell
in from the (lat0, lon0) top-left corner.
"""

from __future__ import annotations

import datetime
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FormatError

DATASET_MAGIC = b"GUQD"
DATASET_VERSION = 1
MANIFEST_NAME = "manifest.txt"
TARGET_SENTINEL = np.uint32(0x7FC00000).view(np.float32)

REGION_NA = "NorthAmerica"
REGION_EU = "Europe"
REGION_SYNTH = "Synthetic"

VALID_CHANNEL_COUNTS = (28, 51)


@dataclass(frozen=True)
class RegionSpec:
    """Raster geometry: grid shape plus a top-left geographic anchor in degrees."""

    name: str
    h: int
    w: int
    lat0: float
    lon0: float
    cell_size: float = 0.1  # ~11.1 km per cell

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ContractError(f"grid shape ({self.h}, {self.w}) must be positive")
        if self.cell_size <= 0:
            raise ContractError(f"cell_size must be positive, got {self.cell_size}")

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        if not (0 <= row < self.h and 0 <= col < self.w):
            raise ContractError(f"cell ({row}, {col}) outside {self.h}x{self.w} grid")
        return (self.lat0 - (row + 0.5) * self.cell_size,
                self.lon0 + (col + 0.5) * self.cell_size)

    def nearest_cell(self, lat: float, lon: float) -> tuple[int, int]:
        """Map a coordinate inside the region to its nearest cell.

        Cell centers round-trip to themselves. Coordinates outside the
        rectangle are an error rather than a silent clamp.
        """
        lat_min = self.lat0 - self.h * self.cell_size
        lon_max = self.lon0 + self.w * self.cell_size
        if not (lat_min <= lat <= self.lat0 and self.lon0 <= lon <= lon_max):
            raise ContractError(
                f"({lat}, {lon}) outside region {self.name}: "
                f"lat [{lat_min:.3f}, {self.lat0:.3f}], lon [{self.lon0:.3f}, {lon_max:.3f}]")
        row = min(self.h - 1, max(0, int(round((self.lat0 - lat) / self.cell_size - 0.5))))
        col = min(self.w - 1, max(0, int(round((lon - self.lon0) / self.cell_size - 0.5))))
        return row, col


def region_north_america() -> RegionSpec:
    """31x49 grid anchored over the northeastern US station cluster."""
    return RegionSpec(REGION_NA, 31, 49, lat0=42.5, lon0=-76.0)


def region_europe() -> RegionSpec:
    """31x27 grid anchored over central Europe."""
    return RegionSpec(REGION_EU, 31, 27, lat0=52.0, lon0=2.0)


def region_synthetic(h: int = 31, w: int = 49) -> RegionSpec:
    return RegionSpec(REGION_SYNTH, h, w, lat0=45.0, lon0=-110.0)


@dataclass
class GridSample:
    """One day of data: dense inputs, sparse target, station mask."""

    date: datetime.date
    x: np.ndarray      # (C, H, W) float32
    y: np.ndarray      # (H, W) float32, NaN at unmasked pixels
    mask: np.ndarray   # (H, W) bool

    def __post_init__(self):
        if self.x.ndim != 3:
            raise DimensionError(f"x must be (C, H, W), got {self.x.shape}")
        if self.y.shape != self.x.shape[1:] or self.mask.shape != self.x.shape[1:]:
            raise DimensionError(
                f"y {self.y.shape} and mask {self.mask.shape} must match grid {self.x.shape[1:]}")
        if self.mask.dtype != np.bool_:
            raise ContractError(f"mask must be boolean, got dtype {self.mask.dtype}")
        if not np.all(np.isfinite(self.y[self.mask])):
            raise ContractError(f"{self.date}: masked target pixels must be finite")


# ---------------------------------------------------------------------------
# on-disk format


def _default_channel_names(c: int) -> list[str]:
    return [f"ch{i:02d}" for i in range(c)]


def write_dataset(samples: list[GridSample], spec: RegionSpec, path,
                  channel_names: list[str] | None = None) -> None:
    """Write a dataset directory; output bytes are a pure function of the inputs."""
    if not samples:
        raise ContractError("write_dataset: no samples")
    c, h, w = samples[0].x.shape
    if (h, w) != (spec.h, spec.w):
        raise DimensionError(f"samples are {h}x{w} but region {spec.name} is {spec.h}x{spec.w}")
    if channel_names is None:
        channel_names = _default_channel_names(c)
    if len(channel_names) != c:
        raise ContractError(f"{len(channel_names)} channel names for {c} channels")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"region={spec.name}",
        f"h={spec.h}",
        f"w={spec.w}",
        f"lat0={spec.lat0!r}",
        f"lon0={spec.lon0!r}",
        f"cell_size={spec.cell_size!r}",
        f"channels={c}",
        f"n_days={len(samples)}",
        f"channel_names={','.join(channel_names)}",
    ]
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    seen = set()
    for s in samples:
        if s.x.shape != (c, h, w):
            raise DimensionError(f"{s.date}: shape {s.x.shape} differs from first day {(c, h, w)}")
        if s.date in seen:
            raise ContractError(f"duplicate date {s.date}")
        seen.add(s.date)
        target = np.where(s.mask, s.y.astype(np.float32), TARGET_SENTINEL)
        buf = bytearray()
        buf += DATASET_MAGIC
        buf += struct.pack("<HHHH", DATASET_VERSION, c, h, w)
        buf += np.ascontiguousarray(s.x, dtype="<f4").tobytes()
        buf += np.ascontiguousarray(target, dtype="<f4").tobytes()
        buf += np.ascontiguousarray(s.mask.astype(np.float32), dtype="<f4").tobytes()
        (root / f"{s.date.isoformat()}.guq").write_bytes(bytes(buf))


def read_manifest(path) -> dict[str, str]:
    mf = Path(path) / MANIFEST_NAME
    if not mf.is_file():
        raise FormatError(f"{path}: missing {MANIFEST_NAME}")
    entries: dict[str, str] = {}
    for ln, line in enumerate(mf.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{mf}: line {ln} is not key=value: {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def _read_day_file(fp: Path) -> GridSample:
    try:
        date = datetime.date.fromisoformat(fp.stem)
    except ValueError as err:
        raise FormatError(f"{fp}: file name is not an ISO date") from err
    blob = fp.read_bytes()
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"{fp}: bad magic, not a GUQD day file")
    if len(blob) < 12:
        raise FormatError(f"{fp}: truncated header")
    version, c, h, w = struct.unpack("<HHHH", blob[4:12])
    if version != DATASET_VERSION:
        raise FormatError(f"{fp}: unsupported version {version}")
    need = 12 + 4 * (c + 2) * h * w
    if len(blob) != need:
        raise FormatError(f"{fp}: expected {need} bytes for {c}+2 planes of {h}x{w}, got {len(blob)}")
    planes = np.frombuffer(blob, dtype="<f4", offset=12).reshape(c + 2, h, w).astype(np.float32)
    x = planes[:c]
    y = planes[c]
    mask_plane = planes[c + 1]
    if not np.all((mask_plane == 0.0) | (mask_plane == 1.0)):
        raise FormatError(f"{fp}: mask plane contains values other than 0 and 1")
    return GridSample(date=date, x=x, y=y, mask=mask_plane == 1.0)


def read_dataset(path) -> tuple[list[GridSample], RegionSpec]:
    """Load all day files, sorted by date, and the region geometry."""
    root = Path(path)
    mf = read_manifest(root)
    try:
        spec = RegionSpec(mf["region"], int(mf["h"]), int(mf["w"]),
                          float(mf["lat0"]), float(mf["lon0"]), float(mf["cell_size"]))
        n_days = int(mf["n_days"])
        channels = int(mf["channels"])
    except (KeyError, ValueError) as err:
        raise FormatError(f"{root}/{MANIFEST_NAME}: missing or malformed key: {err}") from err
    files = sorted(root.glob("*.guq"))
    if len(files) != n_days:
        raise FormatError(f"{root}: manifest says {n_days} days but found {len(files)} day files")
    samples = [_read_day_file(fp) for fp in files]
    for s in samples:
        if s.x.shape != (channels, spec.h, spec.w):
            raise FormatError(
                f"{root}: {s.date} has shape {s.x.shape}, manifest says {(channels, spec.h, spec.w)}")
    return samples, spec


# ---------------------------------------------------------------------------
# splits and standardization


def split(samples: list[GridSample], train_frac: float = 0.9, calib: bool = False,
          seed: int = 0):
    """Partition whole days with a seed-deterministic shuffle.

    Returns (train, val), or (train, calib, val) when ``calib`` is set, in
    which case the train portion is halved: earlier shuffled half trains,
    later half calibrates.
    """
    if len(samples) < 10:
        raise ContractError(f"split needs at least 10 samples, got {len(samples)}")
    if not 0.0 < train_frac < 1.0:
        raise ContractError(f"train_frac must be in (0, 1), got {train_frac}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(len(samples) * train_frac))
    n_train = min(max(n_train, 1), len(samples) - 1)
    shuffled = [samples[i] for i in order]
    train, val = shuffled[:n_train], shuffled[n_train:]
    if not calib:
        return train, val
    half = n_train // 2
    return train[:half], train[half:], val


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and standard deviation for z-scoring inputs."""

    mean: np.ndarray  # (C,) float32
    std: np.ndarray   # (C,) float32, strictly positive

    @classmethod
    def from_samples(cls, samples: list[GridSample]) -> "ChannelStats":
        if not samples:
            raise ContractError("ChannelStats.from_samples: no samples")
        c = samples[0].x.shape[0]
        acc = np.zeros(c, dtype=np.float64)
        acc2 = np.zeros(c, dtype=np.float64)
        count = 0
        for s in samples:
            acc += s.x.sum(axis=(1, 2), dtype=np.float64)
            acc2 += (s.x.astype(np.float64) ** 2).sum(axis=(1, 2))
            count += s.x.shape[1] * s.x.shape[2]
        mean = acc / count
        var = np.maximum(acc2 / count - mean ** 2, 0.0)
        std = np.sqrt(var)
        degenerate = std <= 0.0
        if degenerate.any():
            warnings.warn(
                f"channels {np.flatnonzero(degenerate).tolist()} are constant; using std=1",
                RuntimeWarning, stacklevel=2)
            std = np.where(degenerate, 1.0, std)
        return cls(mean=mean.astype(np.float32), std=std.astype(np.float32))


def standardize(samples: list[GridSample], stats: ChannelStats) -> list[GridSample]:
    """Z-score inputs channelwise; targets and masks pass through untouched."""
    out = []
    for s in samples:
        if s.x.shape[0] != stats.mean.shape[0]:
            raise DimensionError(
                f"standardize: sample has {s.x.shape[0]} channels, stats have {stats.mean.shape[0]}")
        x = (s.x - stats.mean[:, None, None]) / stats.std[:, None, None]
        out.append(GridSample(date=s.date, x=x.astype(np.float32), y=s.y, mask=s.mask))
    return out


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class NoiseProfile:
    """Observation-noise model: constant sigma, or sigma stepping to 2x in the
    right half of the grid (columns >= W // 2)."""

    kind: str  # "homoscedastic" | "heteroscedastic"
    sigma: float = 3.0

    def __post_init__(self):
        if self.kind not in ("homoscedastic", "heteroscedastic"):
            raise ContractError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ContractError(f"sigma must be >= 0, got {self.sigma}")

    def sigma_grid(self, h: int, w: int) -> np.ndarray:
        grid = np.full((h, w), self.sigma, dtype=np.float64)
        if self.kind == "heteroscedastic":
            grid[:, w // 2:] *= 2.0
        return grid

    @classmethod
    def parse(cls, text: str) -> "NoiseProfile":
        """CLI grammar: 'homo:SIGMA' or 'hetero' (optionally 'hetero:SIGMA')."""
        head, _, arg = text.partition(":")
        if head == "homo":
            if not arg:
                raise ContractError("homoscedastic noise needs a sigma: homo:SIGMA")
            return cls("homoscedastic", float(arg))
        if head == "hetero":
            return cls("heteroscedastic", float(arg)) if arg else cls("heteroscedastic")
        raise ContractError(f"unknown noise profile {text!r}, expected homo:SIGMA or hetero")


@dataclass(frozen=True)
class GeneratorParams:
    """Everything needed to recompute the noiseless target from a sample's x."""

    seed: int
    channels: int
    noise: NoiseProfile
    station_density: float
    target_channels: tuple[int, int, int]
    target_weights: tuple[float, float, float]
    linear_coef: float
    tanh_coef: float
    tanh_scale: float
    offsets: np.ndarray  # (C,) per-channel unit offset
    scales: np.ndarray   # (C,) per-channel unit scale

    def clean_target(self, x: np.ndarray) -> np.ndarray:
        """Noiseless y for one (C, H, W) input, recomputed from scratch."""
        z = np.zeros(x.shape[1:], dtype=np.float64)
        for idx, wgt in zip(self.target_channels, self.target_weights):
            raw = (x[idx].astype(np.float64) - self.offsets[idx]) / self.scales[idx]
            z += wgt * raw
        return (self.linear_coef * z + self.tanh_coef * np.tanh(z / self.tanh_scale)).astype(np.float32)


def _smooth_field(rng: np.random.Generator, h: int, w: int, n_terms: int = 3):
    """Sum of low-frequency sinusoids; returns (field evaluator, drift slot)."""
    amp = rng.uniform(0.3, 1.0, n_terms)
    fh = rng.uniform(0.2, 1.5, n_terms)
    fw = rng.uniform(0.2, 1.5, n_terms)
    phase = rng.uniform(0.0, 2.0 * math.pi, n_terms)
    rows = np.arange(h)[:, None] / max(h - 1, 1)
    cols = np.arange(w)[None, :] / max(w - 1, 1)

    def at(day: int, drift: float) -> np.ndarray:
        field = np.zeros((h, w), dtype=np.float64)
        for k in range(n_terms):
            field += amp[k] * np.sin(
                2.0 * math.pi * (fh[k] * rows + fw[k] * cols) + phase[k] + drift * day)
        return field

    return at


def _station_mask(rng: np.random.Generator, h: int, w: int, density: float) -> np.ndarray:
    """Clustered Bernoulli stations: thin the rate by a smooth positive field."""
    field = _smooth_field(rng, h, w)(0, 0.0)
    weight = np.exp(1.5 * (field - field.mean()) / (field.std() + 1e-12))
    prob = np.clip(density * weight / weight.mean(), 0.0, 1.0)
    mask = rng.random((h, w)) < prob
    if not mask.any():
        mask[np.unravel_index(np.argmax(prob), prob.shape)] = True
    return mask


def _dates(n_days: int) -> list[datetime.date]:
    # 30-day Junes starting 2005, mirroring a multi-year early-summer record
    return [datetime.date(2005 + d // 30, 6, 1 + d % 30) for d in range(n_days)]


def generate_synthetic(spec: RegionSpec, n_days: int, channels: int,
                       noise_profile: NoiseProfile, station_density: float,
                       seed: int) -> tuple[list[GridSample], GeneratorParams]:
    """Build a synthetic dataset with a known target function.

    Channels 0 and 1 are static north-south / east-west quarter-wave
    ramps, a block of static terrain-like fields follows, and the rest
    drift in phase day by day. The target is a weighted sum of three
    drifting channels through a mild tanh nonlinearity, plus Gaussian
    observation noise. The station mask is sampled once and shared by
    every day. Identical arguments give bitwise-identical datasets.
    """
    if channels not in VALID_CHANNEL_COUNTS:
        raise ContractError(f"channels must be one of {VALID_CHANNEL_COUNTS}, got {channels}")
    if not 0.0 < station_density <= 1.0:
        raise ContractError(f"station_density must be in (0, 1], got {station_density}")
    if n_days < 1:
        raise ContractError(f"n_days must be >= 1, got {n_days}")
    h, w = spec.h, spec.w
    rng = np.random.default_rng(seed)

    n_static = max(2, channels // 4)
    fields = []
    drifts = []
    rows = np.arange(h)[:, None] / max(h - 1, 1)
    cols = np.arange(w)[None, :] / max(w - 1, 1)
    for c in range(channels):
        if c == 0:
            ramp = np.sin(0.5 * math.pi * rows) * np.ones((1, w))
            fields.append(lambda day, drift, f=ramp: f)
            drifts.append(0.0)
        elif c == 1:
            ramp = np.ones((h, 1)) * np.sin(0.5 * math.pi * cols)
            fields.append(lambda day, drift, f=ramp: f)
            drifts.append(0.0)
        else:
            fields.append(_smooth_field(rng, h, w))
            drifts.append(0.0 if c < n_static else float(rng.uniform(0.05, 0.3)))

    # mixed physical units: per-channel affine so standardization has work to do
    scales = np.exp(rng.uniform(math.log(0.5), math.log(50.0), channels))
    offsets = rng.uniform(-2.0, 2.0, channels) * scales

    first_drifting = n_static
    target_channels = (first_drifting, first_drifting + 1, first_drifting + 2)
    if target_channels[-1] >= channels:
        raise ContractError(f"channels={channels} leaves no drifting channels for the target")
    params = GeneratorParams(
        seed=seed, channels=channels, noise=noise_profile, station_density=station_density,
        target_channels=target_channels, target_weights=(0.8, -0.6, 0.4),
        linear_coef=6.0, tanh_coef=5.0, tanh_scale=2.0,
        offsets=offsets.astype(np.float64), scales=scales.astype(np.float64))

    mask = _station_mask(rng, h, w, station_density)
    sigma = noise_profile.sigma_grid(h, w)
    samples = []
    for day, date in enumerate(_dates(n_days)):
        raw = np.stack([fields[c](day, drifts[c]) for c in range(channels)])
        x = (offsets[:, None, None] + scales[:, None, None] * raw).astype(np.float32)
        z = np.zeros((h, w), dtype=np.float64)
        for idx, wgt in zip(params.target_channels, params.target_weights):
            z += wgt * raw[idx]
        clean = params.linear_coef * z + params.tanh_coef * np.tanh(z / params.tanh_scale)
        y = clean + sigma * rng.standard_normal((h, w))
        y = np.where(mask, y.astype(np.float32), np.float32(np.nan))
        samples.append(GridSample(date=date, x=x, y=y, mask=mask.copy()))
    return samples, params


# ---------------------------------------------------------------------------
# station lookup


def station_series(samples: list[GridSample], spec: RegionSpec, lat: float,
                   lon: float) -> tuple[tuple[int, int], list[tuple[datetime.date, float]]]:
    """Target time series at the station cell nearest (lat, lon).

    Returns the resolved (row, col) and (date, value) pairs for the dates
    where that cell is masked. An always-unmasked cell yields an empty
    series and a warning rather than an error.
    """
    row, col = spec.nearest_cell(lat, lon)
    series = [(s.date, float(s.y[row, col])) for s in samples if s.mask[row, col]]
    if not series:
        warnings.warn(f"cell ({row}, {col}) near ({lat}, {lon}) has no station coverage",
                      RuntimeWarning, stacklevel=2)
    return (row, col), series
