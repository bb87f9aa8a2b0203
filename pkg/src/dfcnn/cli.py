"""Command-line harness: train, eval, gradcheck, ablate, partition, synth, summary.

Every subcommand is reproducible under --seed and exits non-zero with a
one-line diagnostic on failure.  Set DFCNN_LOG_LEVEL (DEBUG/INFO/WARNING)
to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data_io, evaluation, gradcheck, model, training
from .model import NetworkConfig, build_network, count_params, summary_table
from .tensor import ShapeError
from .training import TrainConfig

log = logging.getLogger(__name__)


class CliError(Exception):
    """Fatal CLI problem with a user-facing message."""


def _load_config_file(path) -> tuple[dict, dict]:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a JSON object")
    network = raw.get("network", {})
    train = raw.get("train", {})
    extra = set(raw) - {"network", "train"}
    if extra:
        raise CliError(f"config {path}: unknown sections {sorted(extra)}")
    return network, train


def _configs_from_args(args) -> tuple[NetworkConfig, TrainConfig]:
    net_d: dict = {}
    train_d: dict = {}
    if getattr(args, "config", None):
        net_d, train_d = _load_config_file(args.config)
    if getattr(args, "disable_p2", False):
        net_d["use_p2"] = False
    if getattr(args, "disable_p3", False):
        net_d["use_p3"] = False
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"),
                      ("lr", "learning_rate"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            train_d[key] = value
    try:
        return NetworkConfig.from_dict(net_d), TrainConfig.from_dict(train_d)
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad configuration: {exc}") from exc


def _load_fold_dataset(args, net_config: NetworkConfig):
    dataset = data_io.load_dataset(args.data, target=net_config.input_shape[0])
    n_normal = len(dataset.train_normal)
    n_opacity = len(dataset.train_opacity)
    folds = training.make_folds(n_normal, n_opacity, args.folds)
    if not 1 <= args.fold <= args.folds:
        raise CliError(f"--fold must be in 1..{args.folds}")
    return dataset, folds[args.fold - 1]


def _cmd_train(args) -> int:
    net_config, train_config = _configs_from_args(args)
    dataset, fold = _load_fold_dataset(args, net_config)
    net = build_network(net_config, seed=train_config.seed)
    log.info("training fold %d (%d images, %d parameters)",
             fold.index, fold.size(), count_params(net))
    net, trace = training.train(net, fold, dataset, train_config)
    ckpt = training.Checkpoint.capture(net, train_config=train_config,
                                       step=len(trace), fold_id=fold.index)
    training.save_checkpoint(args.out, ckpt)
    training.write_trace(args.trace, trace)
    last = trace[-1] if trace else None
    if last is not None:
        print(f"fold {fold.index}: epoch {last.epoch} "
              f"train_loss={last.train_loss:.6f} "
              f"val_acc={'undefined' if last.val_acc is None else f'{last.val_acc:.4f}'}")
    print(f"checkpoint written to {args.out}; trace written to {args.trace}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    net = ckpt.restore_network()
    dataset = data_io.load_dataset(args.data, target=net.config.input_shape[0])
    labels = [im.label for im in dataset.val]
    report = training.evaluate(net, dataset.val, labels)
    evaluation.write_metrics_summary(
        [(f"fold-{ckpt.fold_id}" if ckpt.fold_id else "model", report)], args.report)
    print(f"report written to {args.report}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .ops import ConvSpec, conv2d, dense, init_dense, tensor_sum
    from .tensor import Tensor

    rng = np.random.default_rng(args.seed or 0)
    checks = []

    x = Tensor(rng.normal(size=(1, 4, 4, 2)))
    spec = ConvSpec.init(3, 2, 2, 3, rng, dtype=np.float64, name="probe_conv")
    checks.append(("conv2d", gradcheck.check_gradients(
        lambda: tensor_sum(conv2d(x, spec)),
        [("conv.w", spec.weights), ("conv.b", spec.bias)])))

    v = Tensor(rng.normal(size=(3, 5)))
    w, b = init_dense(5, 4, rng, dtype=np.float64, name="probe_dense")
    checks.append(("dense", gradcheck.check_gradients(
        lambda: tensor_sum(dense(v, w, b)), [("dense.w", w), ("dense.b", b)])))

    blocks = ((4, 2), (8, 2), (12, 2)) if args.full else ((4, 2),)
    size = 16 if args.full else 8
    cfg = NetworkConfig(blocks=blocks, input_shape=(size, size, 3))
    net = build_network(cfg, seed=args.seed or 0, dtype=np.float64)
    batch = rng.normal(size=(1, size, size, 3)) * 0.5
    checks.append(("network", gradcheck.grad_check(net, batch)))

    worst = 0.0
    for name, report in checks:
        print(f"{name}: max relative error {report.max_rel_error:.3e}")
        worst = max(worst, report.max_rel_error)
    print(f"overall max relative error {worst:.3e} "
          f"({'OK' if worst < args.tolerance else 'FAIL'} at {args.tolerance:g})")
    return 0 if worst < args.tolerance else 1


def _cmd_partition(args) -> int:
    folds = training.make_folds(args.normal, args.opacity, args.folds)
    print(f"{'fold':>4}  {'normals':>8}  {'opacity slice':>16}  {'slice size':>10}  {'total':>6}")
    for f in folds:
        sl = f.opacity_indices
        print(f"{f.index:>4}  {len(f.normal_indices):>8}  "
              f"[{sl.start:>6}, {sl.stop:>6})  {len(sl):>10}  {f.size():>6}")
    return 0


def _cmd_synth(args) -> int:
    dataset = data_io.synth_dataset(args.n, args.n_val, args.size, args.seed)
    data_io.write_image_dir(dataset, args.out)
    print(f"wrote {2 * args.n} train and {2 * args.n_val} val images to {args.out}")
    return 0


def _cmd_summary(args) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    net = ckpt.restore_network()
    print(summary_table(net))
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--fold", type=int, default=1, help="1-based fold index")
    p.add_argument("--folds", type=int, default=3, help="total fold count")
    p.add_argument("--config", help="JSON config file (network/train sections)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--trace", required=True, help="trace CSV output path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfcnn",
        description="Dual-feedback CNN: training, evaluation and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one fold")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train, disable_p2=False, disable_p3=False)

    p = sub.add_parser("ablate", help="train with pathways disabled")
    _add_train_flags(p)
    p.add_argument("--disable-p2", action="store_true",
                   help="drop the 1x1 branch from every block")
    p.add_argument("--disable-p3", action="store_true",
                   help="drop the dilated 5x5 branch from every block")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--full", action="store_true",
                   help="also check a scaled multi-block network (slow)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("partition", help="print the fold table")
    p.add_argument("--normal", type=int, required=True)
    p.add_argument("--opacity", type=int, required=True)
    p.add_argument("--folds", type=int, required=True)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--n", type=int, required=True, help="train images per class")
    p.add_argument("--n-val", type=int, default=None, help="val images per class")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("summary", help="print the architecture table of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=_cmd_summary)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("DFCNN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.n_val is None:
        args.n_val = max(1, args.n // 2)
    try:
        return args.func(args)
    except (CliError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
