"""Differentiable primitives: dilated convolution, pooling, concat, dense,
activations and the binary cross-entropy loss.

All spatial ops take (batch, height, width, channels) tensors and use zero
same-padding, so output height/width always equal the input's.  Reductions
inside convolution and dense accumulate in float64 and cast back to the
input dtype, which keeps 32-bit outputs within rounding of the exact sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ShapeError, Tensor, record

LOSS_CLAMP_EPS = 1e-7  # keeps log() away from 0 in the loss


@dataclass
class ConvSpec:
    """One convolution layer: odd square kernel, dilation, weights, bias.

    Weights are stored (k, k, in_channels, out_channels); padding is always
    "same", i.e. symmetric zero-padding of (k-1)*dilation/2 on each side.
    """

    kernel: int
    dilation: int
    in_channels: int
    out_channels: int
    weights: Tensor = field(repr=False)
    bias: Tensor = field(repr=False)

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        expected = (self.kernel, self.kernel, self.in_channels, self.out_channels)
        if self.weights.shape != expected:
            raise ShapeError(f"weights shape {self.weights.shape} != {expected}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def padding(self) -> int:
        return (self.kernel - 1) * self.dilation // 2

    @staticmethod
    def init(kernel: int, dilation: int, in_channels: int, out_channels: int,
             rng: np.random.Generator, dtype=np.float32, name: str = "conv") -> "ConvSpec":
        """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero bias."""
        fan_in = kernel * kernel * in_channels
        fan_out = kernel * kernel * out_channels
        bound = np.sqrt(6.0 / max(fan_in + fan_out, 1))
        w = rng.uniform(-bound, bound, size=(kernel, kernel, in_channels, out_channels))
        return ConvSpec(
            kernel=kernel, dilation=dilation,
            in_channels=in_channels, out_channels=out_channels,
            weights=Tensor.param(w.astype(dtype), name=f"{name}.w"),
            bias=Tensor.param(np.zeros(out_channels, dtype=dtype), name=f"{name}.b"),
        )


def _check_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a rank-4 (n,h,w,c) tensor, got shape {x.shape}")


_EINSUM_PATHS: dict = {}


def _einsum(subscripts: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """einsum with a per-signature cached contraction path, float64 accumulation."""
    key = (subscripts, a.shape, b.shape)
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path = np.einsum_path(subscripts, a, b, optimize="optimal")[0]
        _EINSUM_PATHS[key] = path
    return np.einsum(subscripts, a, b, optimize=path, dtype=np.float64)


def _pad_spatial(data: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return data
    n, h, w, c = data.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=data.dtype)
    out[:, pad:pad + h, pad:pad + w, :] = data
    return out


def _dilated_windows(data: np.ndarray, kernel: int, dilation: int) -> np.ndarray:
    """View of all same-padded k x k dilated windows, shape (n,h,w,c,k,k)."""
    pad = (kernel - 1) * dilation // 2
    padded = _pad_spatial(data, pad)
    extent = (kernel - 1) * dilation + 1
    win = sliding_window_view(padded, (extent, extent), axis=(1, 2))
    return win[..., ::dilation, ::dilation]


def _conv_core(data: np.ndarray, weights: np.ndarray, kernel: int, dilation: int) -> np.ndarray:
    win = _dilated_windows(data, kernel, dilation)
    out = _einsum("bijcuv,uvco->bijo", win, weights)
    return out.astype(data.dtype, copy=False)


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Dilated same-padded convolution; output spatial dims equal the input's."""
    _check_rank4(x, "conv2d")
    if x.shape[3] != spec.in_channels:
        raise ShapeError(
            f"conv2d: input has {x.shape[3]} channels, spec expects {spec.in_channels}")
    w, b = spec.weights, spec.bias
    out_data = _conv_core(x.data, w.data, spec.kernel, spec.dilation) + b.data
    out = Tensor(out_data.astype(x.dtype, copy=False))

    def grad_fn(g):
        # d/dx is a same-padded convolution of g with the spatially
        # flipped kernel, in/out channels swapped, same dilation.
        w_flip = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2))
        dx = _conv_core(g, w_flip, spec.kernel, spec.dilation)
        win = _dilated_windows(x.data, spec.kernel, spec.dilation)
        dw = _einsum("bijcuv,bijo->uvco", win, g)
        db = g.sum(axis=(0, 1, 2), dtype=np.float64)
        return dx, dw.astype(w.dtype, copy=False), db.astype(b.dtype, copy=False)

    return record(out, (x, w, b), grad_fn)


def maxpool2d(x: Tensor, m: int) -> Tensor:
    """Non-overlapping m x m max pooling with stride m."""
    _check_rank4(x, "maxpool2d")
    n, h, w, c = x.shape
    if m < 1:
        raise ValueError(f"pool size must be >= 1, got {m}")
    if h % m or w % m:
        raise ShapeError(f"maxpool2d: spatial dims ({h},{w}) not divisible by m={m}")
    grid = x.data.reshape(n, h // m, m, w // m, m, c).transpose(0, 1, 3, 5, 2, 4)
    grid = grid.reshape(n, h // m, w // m, c, m * m)
    winners = grid.argmax(axis=-1)
    out = Tensor(np.take_along_axis(grid, winners[..., None], axis=-1)[..., 0])

    def grad_fn(g):
        dgrid = np.zeros_like(grid)
        np.put_along_axis(dgrid, winners[..., None], g[..., None], axis=-1)
        dx = dgrid.reshape(n, h // m, w // m, c, m, m).transpose(0, 1, 4, 2, 5, 3)
        return (dx.reshape(n, h, w, c),)

    return record(out, (x,), grad_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; zero-channel parts are neutral."""
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    for p in parts:
        _check_rank4(p, "concat_channels")
    lead = parts[0].shape[:3]
    for p in parts[1:]:
        if p.shape[:3] != lead:
            raise ShapeError(
                f"concat_channels: batch/spatial mismatch {p.shape[:3]} vs {lead}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=3))
    widths = [p.shape[3] for p in parts]
    edges = np.cumsum(widths)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, edges, axis=3))

    return record(out, tuple(parts), grad_fn)


def concat_features(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-2 (batch, features) tensors along the feature axis."""
    if not parts:
        raise ValueError("concat_features needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_features: bad part shape {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    edges = np.cumsum([p.shape[1] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, edges, axis=1))

    return record(out, tuple(parts), grad_fn)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map on a (batch, features) tensor: x @ W + b."""
    if x.ndim != 2:
        raise ShapeError(f"dense expects rank-2 input, got {x.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense: input width {x.shape[1]} != weight rows {weights.shape[0]}")
    out_data = (x.data.astype(np.float64) @ weights.data.astype(np.float64)) + bias.data
    out = Tensor(out_data.astype(x.dtype, copy=False))

    def grad_fn(g):
        g64 = g.astype(np.float64)
        dx = (g64 @ weights.data.astype(np.float64).T).astype(x.dtype, copy=False)
        dw = (x.data.astype(np.float64).T @ g64).astype(weights.dtype, copy=False)
        db = g.sum(axis=0, dtype=np.float64).astype(bias.dtype, copy=False)
        return dx, dw, db

    return record(out, (x, weights, bias), grad_fn)


def init_dense(in_width: int, out_width: int, rng: np.random.Generator,
               dtype=np.float32, name: str = "dense") -> tuple[Tensor, Tensor]:
    """Glorot-uniform weight matrix and zero bias for a dense layer."""
    bound = np.sqrt(6.0 / max(in_width + out_width, 1))
    w = rng.uniform(-bound, bound, size=(in_width, out_width)).astype(dtype)
    return (Tensor.param(w, name=f"{name}.w"),
            Tensor.param(np.zeros(out_width, dtype=dtype), name=f"{name}.b"))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def grad_fn(g):
        return (g * (x.data > 0),)

    return record(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = Tensor(s)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return record(out, (x,), grad_fn)


def flatten(x: Tensor) -> Tensor:
    """Collapse (n,h,w,c) to (n, h*w*c) in row-major order."""
    _check_rank4(x, "flatten")
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1))

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return record(out, (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: (n,h,w,c) -> (n,c)."""
    _check_rank4(x, "global_avg_pool")
    n, h, w, c = x.shape
    out = Tensor(x.data.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype, copy=False))

    def grad_fn(g):
        dx = np.broadcast_to(g[:, None, None, :] / (h * w), x.shape)
        return (dx.astype(x.dtype, copy=False),)

    return record(out, (x,), grad_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum all elements to a scalar; used by tests and gradient checks."""
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64)).astype(x.dtype))

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return record(out, (x,), grad_fn)


def bce_loss(p: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of predicted probabilities against 0/1 labels.

    Probabilities are clamped to [eps, 1-eps] with eps=1e-7 before the log;
    the clamp blocks gradient flow at saturated predictions.
    """
    t = np.asarray(targets, dtype=np.float64)
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce_loss: labels must be 0 or 1")
    t = t.reshape(p.shape)
    raw = p.data.astype(np.float64)
    clamped = np.clip(raw, LOSS_CLAMP_EPS, 1.0 - LOSS_CLAMP_EPS)
    per_item = -(t * np.log(clamped) + (1.0 - t) * np.log1p(-clamped))
    out = Tensor(np.asarray(per_item.mean()).astype(p.dtype))

    def grad_fn(g):
        inside = (raw >= LOSS_CLAMP_EPS) & (raw <= 1.0 - LOSS_CLAMP_EPS)
        dp = (clamped - t) / (clamped * (1.0 - clamped) * t.size)
        dp = np.where(inside, dp, 0.0) * g
        return (dp.astype(p.dtype, copy=False),)

    return record(out, (p,), grad_fn)
