"""Dense tensors and the reverse-mode gradient tape.

Activations are rank-4 arrays laid out (batch, height, width, channels);
the classification head works on rank-2 (batch, features) arrays.  Both
are carried by the same :class:`Tensor` wrapper.  Primitive operations
(see :mod:`dfcnn.ops`) record themselves on the active :class:`GradTape`,
and :func:`backward` replays the tape in reverse to accumulate adjoints.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class Tensor:
    """A dense float array plus gradient bookkeeping.

    Zero-sized dimensions are legal; a (n, h, w, 0) tensor is the empty
    skip input of the first dual-feedback block and behaves as a neutral
    element under channel concatenation.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def param(data, name: Optional[str] = None) -> "Tensor":
        """Wrap an array as a trainable parameter."""
        return Tensor(data, requires_grad=True, name=name)


class TapeNode(NamedTuple):
    out: Tensor
    inputs: tuple
    grad_fn: Callable[[np.ndarray], tuple]


_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of executed primitives, replayed in reverse.

    Used as a context manager; primitives executed inside the ``with``
    block append one node each, so reversing the node list is a valid
    reverse topological order of the computation.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.watched: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "mismatched GradTape nesting"
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], grad_fn) -> None:
        self.nodes.append(TapeNode(out, tuple(inputs), grad_fn))
        for t in inputs:
            if t.requires_grad:
                self.watched[id(t)] = t

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    """Attach a node to the active tape, if any, and return ``out``."""
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, grad_fn)
    return out


def backward(tape: GradTape, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> dict:
    """Propagate adjoints from a scalar loss back through the tape.

    Returns a dict mapping each requested parameter tensor to its
    gradient array.  Parameters that are not on any path to the loss
    receive an all-zero gradient.  Every watched tensor also gets its
    ``.grad`` attribute set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.out))
        if g_out is None:
            continue  # op not on a path to the loss
        input_grads = node.grad_fn(g_out)
        for inp, g_in in zip(node.inputs, input_grads):
            if g_in is None:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = g_in if acc is None else acc + g_in

    targets = list(params) if params is not None else list(tape.watched.values())
    result: dict[Tensor, np.ndarray] = {}
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[t] = g
    return result
