"""Network assembly: a chain of dual-feedback blocks plus the
classification head, parameter accounting, and inference.

The head takes the last block's two outputs: the main map is globally
average-pooled to a channel vector, the skip map goes through one 3x3
convolution and is flattened, the two are concatenated and passed through
a ReLU dense layer into a single sigmoid unit.  Predictions >= 0.5 are
labelled opacity (the positive class).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .blocks import DualFeedbackParams, df_block
from .ops import ConvSpec, concat_features, conv2d, dense, flatten, global_avg_pool, init_dense, relu, sigmoid
from .tensor import ShapeError, Tensor

DECISION_THRESHOLD = 0.5

# Block schedule (filters, pool) whose parameter count sits near the
# published 7.3M while keeping filters non-decreasing.
DEFAULT_BLOCKS = ((32, 2), (48, 2), (64, 2), (96, 2), (128, 2), (128, 2), (128, 2))
DEFAULT_INPUT_SHAPE = (256, 256, 3)


class ConfigError(ValueError):
    """Raised for structurally invalid network configurations."""


@dataclass(frozen=True)
class NetworkConfig:
    """Block schedule, ablation flags and head settings of a network."""

    blocks: tuple = DEFAULT_BLOCKS
    use_p2: bool = True
    use_p3: bool = True
    input_shape: tuple = DEFAULT_INPUT_SHAPE
    head_dense_width: int = 64
    head_conv_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(f), int(m)) for f, m in self.blocks))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("at least one block is required")
        h, w, c = self.input_shape
        if c < 1 or h < 1 or w < 1:
            raise ConfigError(f"bad input shape {self.input_shape}")
        prev_f = 0
        pool_product = 1
        for f, m in self.blocks:
            if f <= 0 or f % 2:
                raise ConfigError(f"filter counts must be even and positive, got {f}")
            if f < prev_f:
                raise ConfigError("filter counts must be non-decreasing")
            if m < 1:
                raise ConfigError(f"pool sizes must be >= 1, got {m}")
            prev_f = f
            pool_product *= m
        if h % pool_product or w % pool_product:
            raise ConfigError(
                f"input {h}x{w} not divisible by the pool product {pool_product}")
        if self.head_dense_width < 1:
            raise ConfigError("head dense width must be positive")
        k = self.head_conv_kernel
        if k < 1 or k % 2 == 0:
            raise ConfigError("head conv kernel must be odd and positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["input_shape"] = list(self.input_shape)
        return d

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        known = {f.name for f in NetworkConfig.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return NetworkConfig(**d)


def default_config(**overrides) -> NetworkConfig:
    """The full-scale configuration: seven blocks, first (32, 2)."""
    return NetworkConfig(**overrides)


@dataclass
class Network:
    """Built network: config plus every parameter tensor in declared order."""

    config: NetworkConfig
    blocks: list  # DualFeedbackParams per configured block
    head_conv: Optional[ConvSpec]
    hidden_w: Tensor
    hidden_b: Tensor
    out_w: Tensor
    out_b: Tensor
    dtype: np.dtype = np.dtype(np.float32)
    seed: int = 0

    def params(self) -> list:
        """(name, tensor) pairs in deterministic layer order."""
        out = []
        for i, blk in enumerate(self.blocks, start=1):
            for j, pc in ((1, blk.first), (2, blk.second)):
                for role, spec in _pc_layers(pc):
                    out.append((f"block{i}.pc{j}.{role}.w", spec.weights))
                    out.append((f"block{i}.pc{j}.{role}.b", spec.bias))
        if self.head_conv is not None:
            out.append(("head.conv.w", self.head_conv.weights))
            out.append(("head.conv.b", self.head_conv.bias))
        out.append(("head.hidden.w", self.hidden_w))
        out.append(("head.hidden.b", self.hidden_b))
        out.append(("head.out.w", self.out_w))
        out.append(("head.out.b", self.out_b))
        return out


def _pc_layers(pc) -> list:
    layers = [("trunk1", pc.trunk[0]), ("trunk2", pc.trunk[1]), ("trunk3", pc.trunk[2])]
    if pc.point is not None:
        layers.append(("point", pc.point))
    if pc.wide is not None:
        layers.append(("wide", pc.wide))
    return layers


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Construct a network with Glorot-uniform weights, deterministic under seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    h, w, c = config.input_shape

    blocks = []
    x_c, skip_c = c, 0
    for i, (f, m) in enumerate(config.blocks, start=1):
        blk = DualFeedbackParams.init(x_c, skip_c, f, m, rng,
                                      use_p2=config.use_p2, use_p3=config.use_p3,
                                      dtype=dtype, name=f"block{i}")
        blocks.append(blk)
        x_c, skip_c = blk.out_channels, blk.out_skip_channels
        h //= m
        w //= m

    head_conv = None
    feat_width = x_c
    if config.use_p3:
        head_conv = ConvSpec.init(config.head_conv_kernel, 1, skip_c, skip_c,
                                  rng, dtype, "head.conv")
        feat_width += h * w * skip_c
    hidden_w, hidden_b = init_dense(feat_width, config.head_dense_width, rng, dtype, "head.hidden")
    out_w, out_b = init_dense(config.head_dense_width, 1, rng, dtype, "head.out")
    return Network(config=config, blocks=blocks, head_conv=head_conv,
                   hidden_w=hidden_w, hidden_b=hidden_b, out_w=out_w, out_b=out_b,
                   dtype=np.dtype(dtype), seed=seed)


def forward_from(network: Network, x: Tensor, skip: Tensor, block_index: int = 0) -> Tensor:
    """Run blocks[block_index:] and the head on intermediate activations."""
    for blk in network.blocks[block_index:]:
        x, skip = df_block(x, skip, blk)
    feats = global_avg_pool(x)
    if network.head_conv is not None:
        side = relu(conv2d(skip, network.head_conv))
        feats = concat_features([feats, flatten(side)])
    hidden = relu(dense(feats, network.hidden_w, network.hidden_b))
    return sigmoid(dense(hidden, network.out_w, network.out_b))


def forward_graph(network: Network, x: Tensor) -> Tensor:
    """Forward pass returning per-item opacity probabilities, shape (n, 1)."""
    h, w, c = network.config.input_shape
    if x.ndim != 4 or x.shape[1:] != (h, w, c):
        raise ShapeError(
            f"network expects input (n, {h}, {w}, {c}), got {x.shape}")
    n = x.shape[0]
    skip = Tensor.zeros((n, h, w, 0), dtype=network.dtype)
    return forward_from(network, x, skip, 0)


def predict(network: Network, batch) -> np.ndarray:
    """Probabilities for one batch, shape (n,); no gradient recording."""
    x = Tensor(np.asarray(batch, dtype=network.dtype))
    return forward_graph(network, x).data[:, 0].copy()


def predict_all(network: Network, images: Sequence[np.ndarray],
                batch_size: int = 16) -> np.ndarray:
    """Probabilities for a sequence of (1,h,w,c) images, evaluated in chunks."""
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = np.concatenate(list(images[start:start + batch_size]), axis=0)
        chunks.append(predict(network, batch))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def count_params(network: Network) -> int:
    """Exact number of scalar weights and biases in the network."""
    return sum(t.data.size for _, t in network.params())


def _shape_str(shape) -> str:
    return "(" + ", ".join(str(s) for s in shape) + ")"


def summary_table(network: Network) -> str:
    """Plain-text per-layer table: name, output shape, parameter count."""
    cfg = network.config
    h, w, _ = cfg.input_shape
    rows = []
    for i, blk in enumerate(network.blocks, start=1):
        half = blk.filters // 2
        for j, pc in ((1, blk.first), (2, blk.second)):
            for role, spec in _pc_layers(pc):
                out_c = blk.filters if role.startswith("trunk") else half
                n_par = spec.weights.size + spec.bias.size
                rows.append((f"block{i}.pc{j}.{role}", (h, w, out_c), n_par))
        h //= blk.pool
        w //= blk.pool
        rows.append((f"block{i}.pool", (h, w, blk.out_channels), 0))
    rows.append(("head.gap", (network.blocks[-1].out_channels,), 0))
    if network.head_conv is not None:
        sc = network.blocks[-1].out_skip_channels
        rows.append(("head.conv", (h, w, sc),
                     network.head_conv.weights.size + network.head_conv.bias.size))
    rows.append(("head.hidden", (cfg.head_dense_width,),
                 network.hidden_w.size + network.hidden_b.size))
    rows.append(("head.out", (1,), network.out_w.size + network.out_b.size))

    name_w = max(len(r[0]) for r in rows)
    shape_w = max(len(_shape_str(r[1])) for r in rows)
    lines = [f"{'layer':<{name_w}}  {'output':<{shape_w}}  params"]
    lines.append("-" * (name_w + shape_w + 10))
    for name, shape, n_par in rows:
        lines.append(f"{name:<{name_w}}  {_shape_str(shape):<{shape_w}}  {n_par}")
    lines.append("-" * (name_w + shape_w + 10))
    lines.append(f"total parameters: {count_params(network)}")
    return "\n".join(lines)
