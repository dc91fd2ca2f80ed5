"""Dense tensors, the recording tape and learnable parameters.

A :class:`Tape` records every differentiable operation executed while it is
active (``with Tape() as tape: ...``). Nodes are appended in execution order,
which is already a topological order, so :func:`backward` just walks the list
in reverse. Outside an active tape, operations run eagerly and record nothing.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def numel(self) -> int:
        return self.n * self.c * self.h * self.w


class Tensor:
    """An n-d array plus an optional reference to the tape node that made it.

    Feature maps are 4-D ``(n, c, h, w)``; reductions produce 0-d scalars.
    """

    __slots__ = ("data", "node", "param")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.node: Optional[Node] = None
        self.param: Optional[Parameter] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def shape4(self) -> Shape4:
        if self.data.ndim != 4:
            raise ValueError(f"expected a 4-D tensor, got shape {self.data.shape}")
        return Shape4(*self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self.param is not None or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = "param" if self.param is not None else ("node" if self.node else "const")
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, {tag})"

    # operator sugar; implementations live in ops
    def __add__(self, other: "Tensor") -> "Tensor":
        from .ops import add

        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from .ops import sub

        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from .ops import mul

        return mul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    """One recorded operation."""

    op: str
    index: int
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    tape: "Tape"


class Tape:
    """Ordered record of differentiable operations (single writer)."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise RuntimeError("this tape was already consumed by backward()")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], out: np.ndarray,
               backward: BackwardFn) -> Tensor:
        node = Node(op, len(self.nodes), inputs, backward, self)
        self.nodes.append(node)
        t = Tensor(out)
        t.node = node
        return t


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def tracks(t: Tensor, tape: Optional[Tape]) -> bool:
    """Whether gradients must flow into ``t`` on ``tape``."""
    if tape is None:
        return False
    if t.param is not None:
        return True
    return t.node is not None and t.node.tape is tape


def apply(op: str, inputs: Sequence[Tensor], out: np.ndarray,
          make_backward: Callable[[tuple[bool, ...]], BackwardFn]) -> Tensor:
    """Wrap a forward result, recording it when any input is tracked.

    ``make_backward`` receives a per-input flag telling which input gradients
    are actually needed, so expensive terms can be skipped.
    """
    tape = active_tape()
    needs = tuple(tracks(t, tape) for t in inputs)
    if not any(needs):
        return Tensor(out)
    return tape.record(op, tuple(inputs), out, make_backward(needs))


class Parameter:
    """A learnable tensor with its gradient and AdamW moment estimates."""

    def __init__(self, value, name: str = "", dtype=None):
        self.name = name
        self.value = Tensor(value, dtype=dtype)
        self.value.param = self
        self.grad = np.zeros_like(self.value.data)
        self.m = np.zeros_like(self.value.data)
        self.v = np.zeros_like(self.value.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr: np.ndarray) -> None:
        arr = np.asarray(arr, dtype=self.value.data.dtype)
        if arr.shape != self.value.data.shape:
            raise ValueError(
                f"{self.name}: shape {arr.shape} != {self.value.data.shape}"
            )
        self.value.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.data.shape

    @property
    def size(self) -> int:
        return int(self.value.data.size)

    def astype(self, dtype) -> None:
        """Switch precision in place (used by gradient checks)."""
        self.value.data = self.value.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def backward(loss: Tensor) -> list[Parameter]:
    """Reverse pass from a scalar ``loss``.

    Every Parameter reachable from ``loss`` gets its ``grad`` overwritten with
    d(loss)/d(value); parameters that are not reachable keep their old grad.
    The tape is consumed: a second call on the same tape raises, so grads are
    never silently doubled.
    """
    if loss.node is None:
        raise RuntimeError("backward() needs a tensor recorded on a tape")
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss.node.tape
    if tape.consumed:
        raise RuntimeError("this tape was already consumed by backward()")

    node_grads: dict[int, np.ndarray] = {
        loss.node.index: np.ones_like(loss.data)
    }
    param_grads: dict[int, tuple[Parameter, np.ndarray]] = {}

    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = node_grads.pop(node.index, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if inp.param is not None:
                key = id(inp.param)
                if key in param_grads:
                    param_grads[key] = (inp.param, param_grads[key][1] + gi)
                else:
                    param_grads[key] = (inp.param, gi)
            elif inp.node is not None and inp.node.tape is tape:
                idx = inp.node.index
                if idx in node_grads:
                    node_grads[idx] = node_grads[idx] + gi
                else:
                    node_grads[idx] = gi

    tape.consumed = True
    tape.nodes.clear()
    touched = []
    for p, g in param_grads.values():
        p.grad = np.asarray(g, dtype=p.value.data.dtype).reshape(p.shape)
        touched.append(p)
    return touched
