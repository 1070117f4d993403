"""Reverse-mode automatic differentiation over dense NCHW float32 tensors.

This is deliberately small: exactly the kernels a raster U-Net and its
losses need (convolution, transposed convolution, max pooling, a handful
of elementwise ops, inverted dropout, a masked mean) plus Adam and a
binary checkpoint format. Values are stored as float32; reductions that
feed statistics or bias gradients accumulate in float64.

Ops executed inside a ``with Tape():`` block are recorded; ``backward``
replays the tape in exact reverse order and accumulates gradients on
every tensor with ``requires_grad``. Gradients of a tensor feeding
several consumers add up. The active-tape stack is thread local, so
independent single-threaded contexts (one per seed, one per MC pass)
never share state.
"""

from __future__ import annotations

import struct
import threading
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "zero_grads",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "relu",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "softplus",
    "scale",
    "add_scalar",
    "concat_channels",
    "slice_channels",
    "pad2d",
    "crop2d",
    "mean_masked",
    "dropout",
    "AdamState",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """A dense float32 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of one forward pass, replayed in reverse by backward()."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must nest"
        return False

    def __len__(self) -> int:
        return len(self._records)


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it on the active tape if grads are needed."""
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append((out, inputs, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) through every op recorded on the tape.

    The loss must be a scalar produced under this tape. Tensors never
    touched by the traversal keep grad=None, which downstream consumers
    (Adam, clipping) treat as an exact zero.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(tape._records):
        gout = out.grad
        if gout is None:
            continue
        gins = backward_fn(gout)
        for tensor, g in zip(inputs, gins):
            if g is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                # copy: backward fns may alias one buffer for several inputs
                tensor.grad = np.array(g, dtype=np.float32)
            else:
                tensor.grad += np.asarray(g, dtype=np.float32)


def zero_grads(tensors) -> None:
    """Reset gradients to zero buffers (disconnected tensors then read as 0)."""
    if isinstance(tensors, Mapping):
        tensors = tensors.values()
    for t in tensors:
        t.grad = np.zeros_like(t.data)


def _require_rank(op: str, t: Tensor, rank: int, what: str = "input") -> None:
    if t.ndim != rank:
        raise DimensionError(f"{op}: {what} must have rank {rank}, got shape {t.shape}")


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution kernels


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather conv windows into a (N*ho*wo, C*kh*kw) matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return windows.reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an (Cout,Cin,kh,kw) kernel."""
    _require_rank("conv2d", x, 4)
    _require_rank("conv2d", weight, 4, "weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(f"conv2d: input channel axis Cin={cin} does not match weight Cin={wcin}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} must be ({cout},)")
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(
            f"conv2d: spatial axes H={h}, W={w} incompatible with kernel ({kh},{kw}), "
            f"stride {stride}, padding {padding}")
    ho = span_h // stride + 1
    wo = span_w // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_flat = cols @ wmat.T
    if bias is not None:
        out_flat = out_flat + bias.data
    out = out_flat.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    hp, wp = xp.shape[2], xp.shape[3]

    def backward_fn(g: np.ndarray):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gw = (gf.T @ cols).reshape(cout, cin, kh, kw)
        gcols = (gf @ wmat).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros((n, cin, hp, wp), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        if bias is None:
            return gx, gw
        gb = gf.sum(axis=0, dtype=np.float64).astype(np.float32)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, backward_fn)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Transposed convolution, the exact adjoint of conv2d with the same kernel.

    Weight layout is (Cin, Cout, kh, kw) so that the tensor used by a
    conv2d mapping Cout'->Cin' channels can be reused directly.
    """
    _require_rank("conv_transpose2d", x, 4)
    _require_rank("conv_transpose2d", weight, 4, "weight")
    if stride not in (1, 2):
        raise ContractError(f"conv_transpose2d: stride must be 1 or 2, got {stride}")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(
            f"conv_transpose2d: input channel axis Cin={cin} does not match weight Cin={wcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv_transpose2d: bias shape {bias.shape} must be ({cout},)")
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw

    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, cin)
    out = np.zeros((n, cout, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            contrib = (xt @ weight.data[:, :, i, j]).reshape(n, h, w, cout)
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += \
                contrib.transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray):
        gx_flat = np.zeros((n * h * w, cin), dtype=np.float32)
        gw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gs = g[:, :, i:i + stride * h:stride, j:j + stride * w:stride]
                gs_flat = np.ascontiguousarray(gs.transpose(0, 2, 3, 1)).reshape(n * h * w, cout)
                gx_flat += gs_flat @ weight.data[:, :, i, j].T
                gw[:, :, i, j] = xt.T @ gs_flat
        gx = gx_flat.reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, backward_fn)


def maxpool2d(x: Tensor, k: int = 2) -> tuple[Tensor, np.ndarray]:
    """k*k max pooling with stride k. Returns (values, window-local argmax).

    Ties route the gradient to the first maximum in row-major window
    order; the returned indices are that argmax in [0, k*k).
    """
    _require_rank("maxpool2d", x, 4)
    n, c, h, w = x.shape
    if k < 1:
        raise ContractError(f"maxpool2d: k must be >= 1, got {k}")
    if h % k or w % k:
        raise DimensionError(f"maxpool2d: spatial axes H={h}, W={w} not divisible by k={k}")
    ho, wo = h // k, w // k
    windows = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, ho, wo, k * k)
    idx = windows.argmax(axis=-1)  # argmax takes the first max: row-major tie-break
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        gw = np.zeros((n, c, ho, wo, k * k), dtype=np.float32)
        np.put_along_axis(gw, idx[..., None], g[..., None].astype(np.float32), axis=-1)
        gx = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _emit(out, (x,), backward_fn), idx


# ---------------------------------------------------------------------------
# elementwise ops (exact shape equality, no tensor-tensor broadcasting)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, np.float32(0))

    def backward_fn(g: np.ndarray):
        return ((g * (x.data > 0)).astype(np.float32),)

    return _emit(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)

    def backward_fn(g: np.ndarray):
        return g, g

    return _emit(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)

    def backward_fn(g: np.ndarray):
        return g, -g

    return _emit(a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)

    def backward_fn(g: np.ndarray):
        return g * b.data, g * a.data

    return _emit(a.data * b.data, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b. The caller keeps b away from zero."""
    _require_same_shape("div", a, b)
    out = a.data / b.data

    def backward_fn(g: np.ndarray):
        ga = g / b.data
        gb = -g * out / b.data
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def neg(x: Tensor) -> Tensor:
    def backward_fn(g: np.ndarray):
        return (-g,)

    return _emit(-x.data, (x,), backward_fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward_fn(g: np.ndarray):
        return (g * out,)

    return _emit(out, (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    """Natural log. The caller keeps x strictly positive."""

    def backward_fn(g: np.ndarray):
        return (g / x.data,)

    return _emit(np.log(x.data), (x,), backward_fn)


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x) computed as max(x,0) + log1p(e^-|x|) so large x never overflows."""
    d = x.data
    out = np.maximum(d, np.float32(0)) + np.log1p(np.exp(-np.abs(d)))

    def backward_fn(g: np.ndarray):
        # sigmoid via the same overflow-safe split
        e = np.exp(-np.abs(d))
        sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.float32)
        return (g * sig,)

    return _emit(out, (x,), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)

    def backward_fn(g: np.ndarray):
        return (g * s32,)

    return _emit(x.data * s32, (x,), backward_fn)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def backward_fn(g: np.ndarray):
        return (g,)

    return _emit(x.data + np.float32(c), (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    _require_rank("concat_channels", a, 4)
    _require_rank("concat_channels", b, 4, "second input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"concat_channels: N/H/W axes must match, got {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def backward_fn(g: np.ndarray):
        return g[:, :ca], g[:, ca:]

    return _emit(np.concatenate([a.data, b.data], axis=1), (a, b), backward_fn)


def slice_channels(x: Tensor, c0: int, c1: int) -> Tensor:
    """Take channels [c0, c1) of an NCHW tensor."""
    _require_rank("slice_channels", x, 4)
    c = x.shape[1]
    if not (0 <= c0 < c1 <= c):
        raise DimensionError(f"slice_channels: range [{c0},{c1}) invalid for C={c}")

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, c0:c1] = g
        return (gx,)

    return _emit(x.data[:, c0:c1].copy(), (x,), backward_fn)


def pad2d(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Zero-pad the bottom/right of the spatial axes up to (h_out, w_out)."""
    _require_rank("pad2d", x, 4)
    n, c, h, w = x.shape
    if h_out < h or w_out < w:
        raise DimensionError(f"pad2d: target ({h_out},{w_out}) smaller than input ({h},{w})")
    out = np.zeros((n, c, h_out, w_out), dtype=np.float32)
    out[:, :, :h, :w] = x.data

    def backward_fn(g: np.ndarray):
        return (np.ascontiguousarray(g[:, :, :h, :w]),)

    return _emit(out, (x,), backward_fn)


def crop2d(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Keep the top-left (h_out, w_out) window of the spatial axes."""
    _require_rank("crop2d", x, 4)
    n, c, h, w = x.shape
    if h_out > h or w_out > w:
        raise DimensionError(f"crop2d: target ({h_out},{w_out}) larger than input ({h},{w})")

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, :, :h_out, :w_out] = g
        return (gx,)

    return _emit(x.data[:, :, :h_out, :w_out].copy(), (x,), backward_fn)


def mean_masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x over True positions of a boolean mask; scalar output.

    Accumulates in float64. Unmasked positions contribute nothing to the
    value and receive an exactly zero gradient.
    """
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ContractError(f"mean_masked: mask must be boolean, got dtype {mask.dtype}")
    if mask.shape != x.shape:
        raise DimensionError(f"mean_masked: mask shape {mask.shape} must equal input {x.shape}")
    m = int(mask.sum())
    if m == 0:
        raise ContractError("mean_masked: mask selects no elements")
    out = np.float32(x.data[mask].sum(dtype=np.float64) / m)

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[mask] = np.float32(float(g.reshape(())) / m)
        return (gx,)

    return _emit(out, (x,), backward_fn)


def dropout(x: Tensor, p: float, active: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: keep with prob 1-p and scale by 1/(1-p).

    Identity when inactive or p == 0, so inference costs nothing unless a
    caller (MC sampling) turns it on deliberately.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: rate must be in [0, 1), got {p}")
    if not active or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: an active, nonzero rate needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(np.float32) * np.float32(1.0 / (1.0 - p))

    def backward_fn(g: np.ndarray):
        return (g * keep,)

    return _emit(x.data * keep, (x,), backward_fn)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction; lr is constant, no schedule.

    Tensors with grad=None are treated as zero-gradient: their moments
    decay and (from fresh state) the parameters stay unchanged.
    """
    state.step += 1
    t = state.step
    bc1 = np.float32(1.0 - beta1 ** t)
    bc2 = np.float32(1.0 - beta2 ** t)
    b1 = np.float32(beta1)
    b2 = np.float32(beta2)
    for name, p in params.items():
        if name not in state.m:
            raise ContractError(f"adam_step: no state for parameter '{name}'")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        v *= b2
        if g is not None:
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for '{name}'")
            m += np.float32(1.0 - beta1) * g
            v += np.float32(1.0 - beta2) * (g * g)
        p.data -= np.float32(lr) * (m / bc1) / (np.sqrt(v / bc2) + np.float32(eps))


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "GUQW" | version u16 | tensor count u32 | per tensor:
#   name length u16, UTF-8 name, rank u8, dims u32 each,
#   row-major little-endian float32 payload.

CHECKPOINT_MAGIC = b"GUQW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    """Write named tensors in insertion order; byte output is deterministic."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<H", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(params))
    for name, t in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContractError(f"save_checkpoint: name too long ({len(raw)} bytes)")
        if t.data.ndim > 0xFF:
            raise ContractError(f"save_checkpoint: rank {t.data.ndim} exceeds format limit")
        buf += struct.pack("<H", len(raw))
        buf += raw
        buf += struct.pack("<B", t.data.ndim)
        for d in t.data.shape:
            buf += struct.pack("<I", d)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, Tensor]:
    """Read a checkpoint back into named Tensors, preserving order."""
    blob = Path(path).read_bytes()

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated while reading {what}")
        piece = blob[off:off + n]
        off += n
        return piece

    off = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a GUQW checkpoint")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * size, f"payload of '{name}'")
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if name in params:
            raise FormatError(f"{path}: duplicate tensor name '{name}'")
        params[name] = Tensor(data)
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after last tensor")
    return params
