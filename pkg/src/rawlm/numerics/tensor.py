"""Tensor container and the tape that records differentiable operations.

A :class:`Tape` is opened around a forward pass::

    with Tape() as tape:
        loss = model_loss(params, batch)
    tape.backward(loss)          # fills ``p.grad`` for every leaf parameter

Operations only record themselves while a tape is active in the current
context and at least one input requires a gradient, so inference code simply
runs without a tape.  Each thread (and each ``contextvars`` context) sees its
own active tape, which is what lets gradient shards run side by side.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import UsageError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "rawlm_active_tape", default=None
)
_DEFAULT_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "rawlm_default_dtype", default=np.dtype(np.float32)
)


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    Only ``float32`` (the default) and ``float64`` are meaningful; the 64-bit
    mode exists for gradient checking.
    """
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dt}")
    token = _DEFAULT_DTYPE.set(dt)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


class Tensor:
    """Dense row-major floating point array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        dt = np.dtype(dtype) if dtype is not None else default_dtype()
        arr = np.asarray(data, dtype=dt)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    op: str


class Tape:
    """Ordered record of the differentiable operations of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise UsageError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        output.requires_grad = True
        output.node_id = len(self.nodes)
        output._tape = self
        self.nodes.append(_Node(tuple(inputs), output, backward, op))
        return output

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[Optional[np.ndarray]]:
        """Return d loss / d t for each tensor in ``wrt`` without touching ``.grad``.

        Tensors the loss does not depend on get ``None``.
        """
        grads = self._sweep(loss)
        return [grads.get(id(t)) for t in wrt]

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d leaf into ``leaf.grad`` for every requires-grad leaf."""
        grads = self._sweep(loss)
        seen = set()
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.node_id is None and id(t) not in seen:
                    seen.add(id(t))
                    g = grads.get(id(t))
                    if g is None:
                        continue
                    if t.grad is None:
                        t.grad = g.astype(t.dtype, copy=True)
                    else:
                        t.grad += g

    def _sweep(self, loss: Tensor) -> dict:
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise UsageError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            # intermediates are dropped once consumed; leaf entries persist
            in_grads = node.backward(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return grads


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and put it on the active tape if needed."""
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward)
    return out


def backward(loss: Tensor) -> None:
    """Run the reverse sweep on the tape that produced ``loss``."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise UsageError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)
