"""Fold construction, the Adam optimizer, the training loop, and
checkpoint/trace serialization.

Folds follow the floor-division scheme over the opacity class: every fold
carries all normal images, fold k carries the k-th slice of size
floor(n_opacity / k_folds), and the final fold absorbs any remainder.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluation import MetricsReport, confusion, make_report
from .model import Network, NetworkConfig, build_network, count_params, forward_graph, predict_all
from .ops import bce_loss
from .tensor import GradTape, Tensor, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "dfcnn-checkpoint"
CHECKPOINT_VERSION = 1
TRACE_COLUMNS = ("epoch", "train_loss", "val_acc", "val_sen", "val_spe", "val_f1", "val_apt")


class CheckpointError(IOError):
    """Raised when a checkpoint file is malformed, truncated or mismatched."""


@dataclass(frozen=True)
class FoldSpec:
    """One training fold: all normals plus one slice of the opacity images."""

    index: int  # 1-based
    normal_indices: range
    opacity_indices: range

    def size(self) -> int:
        return len(self.normal_indices) + len(self.opacity_indices)


def make_folds(n_normal: int, n_opacity: int, k_folds: int) -> list[FoldSpec]:
    """Partition opacity indices into k floor-division slices.

    Slices are disjoint and cover 0..n_opacity; the last fold absorbs the
    remainder.  Every fold includes all normal indices.
    """
    if n_normal <= 0 or n_opacity <= 0 or k_folds <= 0:
        raise ValueError("counts and fold number must be positive")
    if k_folds > n_opacity:
        raise ValueError(f"cannot split {n_opacity} opacity images into {k_folds} folds")
    base = n_opacity // k_folds
    folds = []
    for k in range(1, k_folds + 1):
        stop = n_opacity if k == k_folds else base * k
        folds.append(FoldSpec(index=k,
                              normal_indices=range(n_normal),
                              opacity_indices=range(base * (k - 1), stop)))
    return folds


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.5e-3
    batch_size: int = 2
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in TrainConfig.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return TrainConfig(**d)


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter tensor."""

    m: list
    v: list

    @staticmethod
    def zeros_like(params: Sequence[Tensor]) -> "AdamState":
        return AdamState(m=[np.zeros_like(p.data) for p in params],
                         v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState, config: TrainConfig, step: int) -> None:
    """One bias-corrected Adam update, in place.  ``step`` is 1-based."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and moments must align")
    b1, b2 = config.beta1, config.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape}")
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        p.data -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype)


@dataclass
class TraceRow:
    """One epoch of training: loss plus validation metrics (None = undefined)."""

    epoch: int
    train_loss: float
    val_acc: Optional[float]
    val_sen: Optional[float]
    val_spe: Optional[float]
    val_f1: Optional[float]
    val_apt: Optional[float]

    @staticmethod
    def from_report(epoch: int, train_loss: float, report: MetricsReport) -> "TraceRow":
        return TraceRow(epoch=epoch, train_loss=train_loss,
                        val_acc=report.acc, val_sen=report.sen,
                        val_spe=report.spe, val_f1=report.f1, val_apt=report.apt)


def _fold_items(fold: FoldSpec, dataset) -> list:
    items = [dataset.train_normal[i] for i in fold.normal_indices]
    items += [dataset.train_opacity[i] for i in fold.opacity_indices]
    if not items:
        raise ValueError("fold selects no training images")
    return items


def evaluate(network: Network, images: Sequence, labels: Sequence[int],
             batch_size: int = 16) -> MetricsReport:
    """Validation metrics of a network over labelled images."""
    probs = predict_all(network, [im.pixels for im in images], batch_size=batch_size)
    cm = confusion(probs, np.asarray(labels))
    return make_report(cm, params_millions=count_params(network) / 1e6)


def train(network: Network, fold: FoldSpec, dataset, config: TrainConfig):
    """Train a network on one fold; returns (network, list of TraceRow).

    Runs shuffled mini-batch epochs of binary cross-entropy under Adam and
    evaluates the shared validation set after each epoch.  Fully
    deterministic for a fixed seed and dtype.
    """
    items = _fold_items(fold, dataset)
    val_labels = [im.label for im in dataset.val]
    params = [t for _, t in network.params()]
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    step = 0
    trace: list[TraceRow] = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(items)) if config.shuffle else np.arange(len(items))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            batch = np.concatenate([items[i].pixels for i in chunk], axis=0)
            labels = np.array([[items[i].label] for i in chunk], dtype=np.float64)
            x = Tensor(batch.astype(network.dtype, copy=False))
            with GradTape() as tape:
                loss = bce_loss(forward_graph(network, x), labels)
            grads = backward(tape, loss, params=params)
            step += 1
            adam_step(params, [grads[p] for p in params], state, config, step)
            loss_sum += float(loss.data) * len(chunk)
        train_loss = loss_sum / len(order)
        report = evaluate(network, dataset.val, val_labels)
        trace.append(TraceRow.from_report(epoch, train_loss, report))
        log.info("epoch %d: train_loss=%.6f val_acc=%s", epoch, train_loss,
                 f"{report.acc:.4f}" if report.acc is not None else "undefined")
    return network, trace


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate: config, params, optimizer."""

    network_config: NetworkConfig
    param_names: list
    param_arrays: list
    train_config: Optional[TrainConfig] = None
    adam: Optional[AdamState] = None
    step: int = 0
    fold_id: Optional[int] = None
    seed: int = 0
    dtype: str = "float32"

    @staticmethod
    def capture(network: Network, train_config: Optional[TrainConfig] = None,
                adam: Optional[AdamState] = None, step: int = 0,
                fold_id: Optional[int] = None) -> "Checkpoint":
        named = network.params()
        return Checkpoint(network_config=network.config,
                          param_names=[n for n, _ in named],
                          param_arrays=[t.data.copy() for _, t in named],
                          train_config=train_config, adam=adam, step=step,
                          fold_id=fold_id, seed=network.seed,
                          dtype=network.dtype.name)

    def restore_network(self) -> Network:
        net = build_network(self.network_config, seed=self.seed,
                            dtype=np.dtype(self.dtype))
        named = net.params()
        if [n for n, _ in named] != self.param_names:
            raise CheckpointError("layer order mismatch between checkpoint and config")
        for (_, tensor), arr in zip(named, self.param_arrays):
            if tensor.data.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {tensor.name}: {tensor.data.shape} vs {arr.shape}")
            tensor.data[...] = arr
        return net


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a checkpoint: one JSON header line, then raw little-endian blocks.

    Blocks appear in declared layer order (parameters first, then Adam first
    moments, then second moments when present) so the byte stream is fully
    determined by the header.
    """
    dt = np.dtype(ckpt.dtype).newbyteorder("<")
    header = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "dtype": ckpt.dtype,
        "network_config": ckpt.network_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "step": ckpt.step,
        "fold_id": ckpt.fold_id,
        "seed": ckpt.seed,
        "layers": [{"name": n, "shape": list(a.shape)}
                   for n, a in zip(ckpt.param_names, ckpt.param_arrays)],
        "adam_moments": ckpt.adam is not None,
    }
    blob = io.BytesIO()
    blob.write(json.dumps(header, sort_keys=True).encode("utf-8"))
    blob.write(b"\n")
    arrays = list(ckpt.param_arrays)
    if ckpt.adam is not None:
        arrays += list(ckpt.adam.m) + list(ckpt.adam.v)
    for arr in arrays:
        blob.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(blob.getvalue())


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")

    dt = np.dtype(header["dtype"]).newbyteorder("<")
    shapes = [tuple(l["shape"]) for l in header["layers"]]
    names = [l["name"] for l in header["layers"]]
    n_param_values = sum(int(np.prod(s)) for s in shapes)
    n_blocks = 3 if header["adam_moments"] else 1
    expected = newline + 1 + n_param_values * dt.itemsize * n_blocks
    if len(raw) != expected:
        raise CheckpointError(
            f"{path}: corrupt payload, expected {expected} bytes, found {len(raw)}")

    body = raw[newline + 1:]
    values = np.frombuffer(body, dtype=dt)

    def take(offset):
        arrays = []
        for s in shapes:
            size = int(np.prod(s))
            arrays.append(values[offset:offset + size].reshape(s).copy())
            offset += size
        return arrays, offset

    params, offset = take(0)
    adam = None
    if header["adam_moments"]:
        m, offset = take(offset)
        v, offset = take(offset)
        adam = AdamState(m=m, v=v)
    train_config = TrainConfig.from_dict(header["train_config"]) if header["train_config"] else None
    return Checkpoint(network_config=NetworkConfig.from_dict(header["network_config"]),
                      param_names=names, param_arrays=params,
                      train_config=train_config, adam=adam,
                      step=header["step"], fold_id=header["fold_id"],
                      seed=header["seed"], dtype=header["dtype"])


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trace(path, rows: Sequence[TraceRow]) -> None:
    """Trace CSV: columns epoch, train_loss, val_acc, val_sen, val_spe, val_f1, val_apt."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in rows:
            writer.writerow([_format_cell(getattr(r, c)) for c in TRACE_COLUMNS])


def read_trace(path) -> list[TraceRow]:
    """Parse a trace CSV back into rows; empty cells become None."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace columns {header}")
        for rec in reader:
            epoch = int(rec[0])
            vals = [float(v) if v != "" else None for v in rec[1:]]
            rows.append(TraceRow(epoch, vals[0], *vals[1:]))
    return rows
