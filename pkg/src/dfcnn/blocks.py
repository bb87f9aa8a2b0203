"""The two architectural units: process convolution and dual feedback.

A process-convolution unit fans one input out into three branches:

* trunk - three stacked 3x3 convolutions, ``f`` filters each
* point - a single 1x1 convolution, ``f/2`` filters
* wide  - a single 5x5 convolution with dilation 2, ``f/2`` filters

A dual-feedback block runs two process convolutions joined by channel
concatenations and ends in max pooling, producing a main output ``y``
(2f channels when both optional branches are on) and a skip output
``y_skip`` (f/2 channels) that feeds the next block sideways.

Every convolution is followed by ReLU; all branches preserve spatial
dims, so concatenation is always legal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ops import ConvSpec, concat_channels, conv2d, maxpool2d, relu
from .tensor import ShapeError, Tensor


@dataclass
class ProcessConvParams:
    """Parameters of one process-convolution unit.

    ``point``/``wide`` are None when the corresponding branch is ablated;
    the trunk is always present.
    """

    filters: int
    in_channels: int
    trunk: list  # three 3x3 dilation-1 ConvSpecs, in_channels -> f -> f -> f
    point: Optional[ConvSpec]  # 1x1 dilation-1, in_channels -> f/2
    wide: Optional[ConvSpec]   # 5x5 dilation-2, in_channels -> f/2

    @staticmethod
    def init(in_channels: int, filters: int, rng: np.random.Generator,
             use_point: bool = True, use_wide: bool = True,
             dtype=np.float32, name: str = "pc") -> "ProcessConvParams":
        if filters % 2:
            raise ValueError(f"filter count must be even, got {filters}")
        half = filters // 2
        trunk = [
            ConvSpec.init(3, 1, in_channels, filters, rng, dtype, f"{name}.trunk1"),
            ConvSpec.init(3, 1, filters, filters, rng, dtype, f"{name}.trunk2"),
            ConvSpec.init(3, 1, filters, filters, rng, dtype, f"{name}.trunk3"),
        ]
        point = ConvSpec.init(1, 1, in_channels, half, rng, dtype, f"{name}.point") if use_point else None
        wide = ConvSpec.init(5, 2, in_channels, half, rng, dtype, f"{name}.wide") if use_wide else None
        return ProcessConvParams(filters, in_channels, trunk, point, wide)

    def specs(self) -> list:
        """All live ConvSpecs in deterministic order."""
        out = list(self.trunk)
        if self.point is not None:
            out.append(self.point)
        if self.wide is not None:
            out.append(self.wide)
        return out


def process_conv(x: Tensor, params: ProcessConvParams):
    """Run the three branches; returns (trunk_out, point_out, wide_out).

    Branch outputs are None where the branch is ablated.  All present
    outputs match the input spatially; trunk carries f channels, the
    other two f/2 each.
    """
    if x.shape[3] != params.in_channels:
        raise ShapeError(
            f"process_conv: input has {x.shape[3]} channels, expected {params.in_channels}")
    t = x
    for spec in params.trunk:
        t = relu(conv2d(t, spec))
    p = relu(conv2d(x, params.point)) if params.point is not None else None
    w = relu(conv2d(x, params.wide)) if params.wide is not None else None
    return t, p, w


@dataclass
class DualFeedbackParams:
    """Parameters of one dual-feedback block: two process convs + pool size.

    The ablation flags are fixed at construction because they determine
    the second process conv's input width.
    """

    filters: int
    pool: int
    use_p2: bool  # keep the 1x1 (point) branch
    use_p3: bool  # keep the dilated 5x5 (wide) branch
    first: ProcessConvParams   # over the main input x
    second: ProcessConvParams  # over the first concatenation

    @staticmethod
    def init(in_channels: int, skip_channels: int, filters: int, pool: int,
             rng: np.random.Generator, use_p2: bool = True, use_p3: bool = True,
             dtype=np.float32, name: str = "df") -> "DualFeedbackParams":
        if pool < 1:
            raise ValueError(f"pool size must be >= 1, got {pool}")
        half = filters // 2
        mid_channels = skip_channels + filters + (half if use_p2 else 0)
        first = ProcessConvParams.init(in_channels, filters, rng,
                                       use_point=use_p2, use_wide=use_p3,
                                       dtype=dtype, name=f"{name}.pc1")
        second = ProcessConvParams.init(mid_channels, filters, rng,
                                        use_point=use_p2, use_wide=use_p3,
                                        dtype=dtype, name=f"{name}.pc2")
        return DualFeedbackParams(filters, pool, use_p2, use_p3, first, second)

    @property
    def out_channels(self) -> int:
        half = self.filters // 2
        return (half if self.use_p3 else 0) + self.filters + (half if self.use_p2 else 0)

    @property
    def out_skip_channels(self) -> int:
        return self.filters // 2 if self.use_p3 else 0


def df_block_ablated(x: Tensor, x_skip: Tensor, params: DualFeedbackParams,
                     use_p2: bool, use_p3: bool):
    """Dual-feedback block with explicit branch flags; returns (y, y_skip).

    The flags must match the ones the parameters were built with (they
    fix the layer shapes).  With the point branch off, its terms drop out
    of both concatenations; with the wide branch off, the skip output
    collapses to a zero-channel tensor.
    """
    if (use_p2, use_p3) != (params.use_p2, params.use_p3):
        raise ValueError(
            f"ablation flags ({use_p2}, {use_p3}) do not match the block's "
            f"parameters ({params.use_p2}, {params.use_p3})")
    if x.shape[:3] != x_skip.shape[:3]:
        raise ShapeError(
            f"df_block: x {x.shape[:3]} and x_skip {x_skip.shape[:3]} disagree")
    m = params.pool
    if x.shape[1] % m or x.shape[2] % m:
        raise ShapeError(
            f"df_block: spatial dims {x.shape[1:3]} not divisible by pool {m}")

    trunk1, point1, wide1 = process_conv(x, params.first)

    mid_parts = [x_skip, trunk1]
    if use_p2:
        mid_parts.append(point1)
    mid = concat_channels(mid_parts)

    trunk2, point2, wide2 = process_conv(mid, params.second)

    out_parts = []
    if use_p3:
        out_parts.append(wide1)
    out_parts.append(trunk2)
    if use_p2:
        out_parts.append(point2)
    y = maxpool2d(concat_channels(out_parts), m)

    if use_p3:
        y_skip = maxpool2d(wide2, m)
    else:
        n, h, w, _ = x.shape
        y_skip = Tensor.zeros((n, h // m, w // m, 0), dtype=x.dtype.type)
    return y, y_skip


def df_block(x: Tensor, x_skip: Tensor, params: DualFeedbackParams):
    """Dual-feedback block using the flags baked into ``params``."""
    return df_block_ablated(x, x_skip, params, params.use_p2, params.use_p3)
