"""Fully convolutional U-Net regressor over multi-channel rasters.

Encoder level l runs at width base_width * 2**l; the bottleneck doubles
that once more. Each decoder level upsamples with a 2x2 stride-2
transposed convolution, concatenates the matching encoder skip (which
doubles the channel count) and fuses with two 3x3 convolutions. Every
conv block ends in dropout so the same network serves MC sampling. No
batch norm anywhere. Inputs of arbitrary H, W are zero-padded up to the
next multiple of 2**depth and cropped back, so grid shape is preserved.

Two heads share the trunk and differ only in the final 1x1 convolution:
a Gaussian head with 2 output channels (mu, and a raw channel mapped to
sigma^2 = softplus(raw) + 1e-6) or a quantile head with one channel per
requested quantile level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

HEAD_GAUSSIAN = "gaussian"
HEAD_QUANTILE = "quantile"

DEFAULT_TAUS = (0.05, 0.5, 0.95)
SIGMA2_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    base_width: int = 32
    depth: int = 3
    dropout_rate: float = 0.1
    head: str = HEAD_GAUSSIAN
    taus: tuple[float, ...] = DEFAULT_TAUS

    def __post_init__(self):
        if self.in_channels < 1:
            raise ContractError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_width < 1 or self.depth < 1:
            raise ContractError(
                f"base_width and depth must be >= 1, got {self.base_width}, {self.depth}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.head not in (HEAD_GAUSSIAN, HEAD_QUANTILE):
            raise ContractError(f"head must be '{HEAD_GAUSSIAN}' or '{HEAD_QUANTILE}'")
        taus = tuple(float(t) for t in self.taus)
        if self.head == HEAD_QUANTILE:
            if len(taus) < 1 or any(not 0.0 < t < 1.0 for t in taus):
                raise ContractError(f"quantile levels must lie in (0, 1), got {taus}")
            if any(b <= a for a, b in zip(taus, taus[1:])):
                raise ContractError(f"quantile levels must be strictly increasing, got {taus}")
        object.__setattr__(self, "taus", taus)

    @property
    def out_channels(self) -> int:
        return 2 if self.head == HEAD_GAUSSIAN else len(self.taus)


class UNetParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = set(parameter_names(config))
        got = set(tensors)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ContractError(
                f"parameter set does not match config (missing={missing}, unexpected={extra})")
        self.config = config
        self.tensors = {name: tensors[name] for name in parameter_names(config)}

    def require_grad(self, flag: bool = True) -> "UNetParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self


def parameter_names(config: ModelConfig) -> list[str]:
    """Checkpoint order: encoder, bottleneck, decoder (deep to shallow), head."""
    names = []
    for lvl in range(config.depth):
        names += [f"enc{lvl}a_w", f"enc{lvl}a_b", f"enc{lvl}b_w", f"enc{lvl}b_b"]
    names += ["bota_w", "bota_b", "botb_w", "botb_b"]
    for lvl in reversed(range(config.depth)):
        names += [f"up{lvl}_w", f"up{lvl}_b",
                  f"dec{lvl}a_w", f"dec{lvl}a_b", f"dec{lvl}b_w", f"dec{lvl}b_b"]
    names += ["head_w", "head_b"]
    return names


def build(config: ModelConfig, seed: int) -> UNetParams:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, seeded PRNG."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def conv(name: str, cout: int, cin: int, k: int):
        bound = math.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        tensors[name + "_w"] = Tensor(w, requires_grad=True)
        tensors[name + "_b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def upconv(name: str, cin: int, cout: int, k: int):
        bound = math.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cin, cout, k, k)).astype(np.float32)
        tensors[name + "_w"] = Tensor(w, requires_grad=True)
        tensors[name + "_b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    prev = config.in_channels
    for lvl in range(config.depth):
        width = config.base_width * 2 ** lvl
        conv(f"enc{lvl}a", width, prev, 3)
        conv(f"enc{lvl}b", width, width, 3)
        prev = width
    bottleneck = config.base_width * 2 ** config.depth
    conv("bota", bottleneck, prev, 3)
    conv("botb", bottleneck, bottleneck, 3)
    for lvl in reversed(range(config.depth)):
        width = config.base_width * 2 ** lvl
        upconv(f"up{lvl}", width * 2, width, 2)
        conv(f"dec{lvl}a", width, width * 2, 3)
        conv(f"dec{lvl}b", width, width, 3)
    conv("head", config.out_channels, config.base_width, 1)
    return UNetParams(config, tensors)


def forward(params: UNetParams, x: Tensor, dropout_active: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Run the network on an (N, C, H, W) batch; output is (N, heads, H, W)."""
    cfg = params.config
    if x.ndim != 4:
        raise DimensionError(f"forward: input must be NCHW, got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"forward: channel axis C={x.shape[1]} does not match config in_channels={cfg.in_channels}")
    if dropout_active and cfg.dropout_rate > 0.0 and rng is None:
        raise ContractError("forward: dropout_active needs a random generator")
    t = params.tensors
    _, _, h, w = x.shape
    mult = 2 ** cfg.depth
    hp = -(-h // mult) * mult
    wp = -(-w // mult) * mult
    out = ad.pad2d(x, hp, wp) if (hp, wp) != (h, w) else x

    def double_conv(inp: Tensor, name: str) -> Tensor:
        inp = ad.relu(ad.conv2d(inp, t[f"{name}a_w"], t[f"{name}a_b"], padding=1))
        inp = ad.relu(ad.conv2d(inp, t[f"{name}b_w"], t[f"{name}b_b"], padding=1))
        return ad.dropout(inp, cfg.dropout_rate, dropout_active, rng)

    skips = []
    for lvl in range(cfg.depth):
        out = double_conv(out, f"enc{lvl}")
        skips.append(out)
        out, _ = ad.maxpool2d(out, 2)
    out = double_conv(out, "bot")
    for lvl in reversed(range(cfg.depth)):
        out = ad.conv_transpose2d(out, t[f"up{lvl}_w"], t[f"up{lvl}_b"], stride=2)
        out = ad.concat_channels(skips[lvl], out)
        out = double_conv(out, f"dec{lvl}")
    out = ad.conv2d(out, t["head_w"], t["head_b"])
    if (hp, wp) != (h, w):
        out = ad.crop2d(out, h, w)
    return out


def gaussian_moments(head_out: Tensor) -> tuple[Tensor, Tensor]:
    """Split a 2-channel head into (mu, sigma^2) inside the autodiff graph.

    sigma^2 = softplus(raw) + 1e-6, strictly positive by construction.
    """
    if head_out.ndim != 4 or head_out.shape[1] != 2:
        raise DimensionError(f"gaussian_moments: expected (N, 2, H, W), got {head_out.shape}")
    mu = ad.slice_channels(head_out, 0, 1)
    sigma2 = ad.add_scalar(ad.softplus(ad.slice_channels(head_out, 1, 2)), SIGMA2_FLOOR)
    return mu, sigma2


def _single_input(params: UNetParams, x: np.ndarray) -> Tensor:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise DimensionError(f"predict: input must be (C, H, W), got shape {x.shape}")
    if x.shape[0] != params.config.in_channels:
        raise DimensionError(
            f"predict: channel axis C={x.shape[0]} does not match config in_channels="
            f"{params.config.in_channels}")
    return Tensor(x[None])


def predict_gaussian(params: UNetParams, x: np.ndarray, dropout_active: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-head prediction for one (C, H, W) input: (mu, sigma^2) grids."""
    if params.config.head != HEAD_GAUSSIAN:
        raise ContractError(f"predict_gaussian: model head is '{params.config.head}'")
    out = forward(params, _single_input(params, x), dropout_active, rng)
    mu, sigma2 = gaussian_moments(out)
    return mu.data[0, 0], sigma2.data[0, 0]


def predict_quantiles(params: UNetParams, x: np.ndarray) -> tuple[np.ndarray, ...]:
    """Quantile-head prediction for one (C, H, W) input, one grid per level.

    Dropout stays off. Outputs are raw head values in level order; no
    sorting is applied, so quantile crossings pass through and can be
    measured downstream.
    """
    if params.config.head != HEAD_QUANTILE:
        raise ContractError(f"predict_quantiles: model head is '{params.config.head}'")
    out = forward(params, _single_input(params, x), dropout_active=False)
    return tuple(out.data[0, i] for i in range(params.config.out_channels))
