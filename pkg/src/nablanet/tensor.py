"""Dense tensor type and the tape that records operations for reverse-mode AD."""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
GRADCHECK_DTYPE = np.float64


class Tensor:
    """A numpy array with an optional gradient buffer.

    Feature maps are (N, C, H, W). Parameters (biases, BN scale/shift) are 1-D
    and losses are 0-d; those are the only other ranks that appear.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # thin operator sugar; the real ops live in nablanet.ops
    def __add__(self, other):
        from nablanet import ops

        return ops.add_elementwise(self, other)

    def __mul__(self, other):
        from nablanet import ops

        return ops.mul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output: Tensor
    backward_fn: BackwardFn
    tag: str = ""


@dataclass
class Tape:
    """Append-only list of executed ops. Use as a context manager to record."""

    records: list = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def kinds(self) -> list:
        return [r.kind for r in self.records]


_ACTIVE_TAPE: contextvars.ContextVar[Optional[Tape]] = contextvars.ContextVar("nablanet_tape", default=None)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def record(kind: str, inputs: tuple, output: Tensor, backward_fn: BackwardFn, tag: str = "") -> Tensor:
    """Attach ``output`` to the active tape if any input needs a gradient."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.records.append(OpRecord(kind, inputs, output, backward_fn, tag))
    return output


class no_grad:
    """Suspend recording, e.g. for inference or finite differences."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def backward(tape: Tape, loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) through ``tape`` in reverse order.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated. The
    returned dict maps ``id(tensor)`` to its gradient for every tensor reached.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(id(rec.output))
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        g_ins = rec.backward_fn(g_out)
        for t, g in zip(rec.inputs, g_ins):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    # leaves: tensors that were consumed but never produced on this tape
    seen = set()
    for rec in tape.records:
        for t in rec.inputs:
            if not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in produced or key in seen or key not in grads:
                continue
            seen.add(key)
            g = grads[key].astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
    return grads


def zero_grad(params) -> None:
    for p in params:
        p.grad = None
