"""Dense tensor type and the reverse-mode tape.

A :class:`Tensor` wraps a contiguous numpy array of ``float32`` or ``float64``.
Every differentiable op records a :class:`Node` on its output holding the
parent tensors and a closure mapping the output gradient to parent gradients.
:func:`backward` linearises the graph into a :class:`Tape` (topological order)
and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from memroute.errors import GraphError, NonFiniteError, ShapeError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_DTYPE_NAMES = {v: k for k, v in DTYPES.items()}

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return DTYPES["f32"]
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise TypeError(f"unsupported dtype {dtype!r}; expected 'f32' or 'f64'") from None
    dt = np.dtype(dtype)
    if dt not in _DTYPE_NAMES:
        raise TypeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    """Record of one op: its inputs and how to push a gradient through it."""

    parents: tuple
    backward: BackwardFn
    name: str = ""
    consumed: bool = False


class Tensor:
    """Dense n-d array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in _DTYPE_NAMES:
            dt = data.dtype
        else:
            dt = resolve_dtype(dtype)
        arr = np.asarray(data, dtype=dt, order="C")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: BackwardFn, name: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{name} produced non-finite values")
        out = cls.__new__(cls)
        out.data = np.asarray(data, order="C")
        out.grad = None
        out._node = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._node = Node(parents, backward, name)
        return out

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(resolve_dtype(dtype)))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implementations live in ops) -------------------
    def __add__(self, other):
        from memroute.tensor import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from memroute.tensor import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from memroute.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from memroute.tensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from memroute.tensor import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from memroute.tensor import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from memroute.tensor import ops
        return ops.div(self, other)

    def __neg__(self):
        from memroute.tensor import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from memroute.tensor import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from memroute.tensor import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from memroute.tensor import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from memroute.tensor import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from memroute.tensor import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    """Wrap python scalars / arrays as constant tensors, matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


@dataclass
class Tape:
    """Graph nodes in topological order (inputs before outputs)."""

    tensors: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.tensors)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls on different graphs; running
    backward twice through the same graph raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from the graph (no input requires grad)")
    tape = Tape.from_output(loss)
    for t in tape.tensors:
        if t._node is not None and t._node.consumed:
            raise GraphError(f"graph already consumed by a previous backward() (op {t._node.name})")

    grads: dict = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = node.backward(g)
        node.consumed = True
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise GraphError(f"{node.name}: gradient shape {pg.shape} != input shape {p.shape}")
            pg = pg.astype(p.data.dtype, copy=False)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape
