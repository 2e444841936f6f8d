"""Dense tensor with reverse-mode gradients.

Every differentiable operation in :mod:`mmnet.ops` builds a :class:`Tensor`
whose ``_node`` records the inputs and a closure mapping the output gradient
to input gradients. :func:`backward` orders the recorded nodes reverse
topologically and runs each closure exactly once.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference on frozen parameters)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def debug_enabled() -> bool:
    return getattr(_state, "debug", False)


@contextlib.contextmanager
def debug_mode(on: bool = True) -> Iterator[None]:
    """Check every forward result for NaN/Inf while active."""
    prev = debug_enabled()
    _state.debug = on
    try:
        yield
    finally:
        _state.debug = prev


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    """An n-dimensional array with optional gradient tracking.

    ``data`` is a contiguous numpy array; ``grad`` is populated by
    :func:`backward` on leaves that have ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={self._node.op}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op}{tag})"

    # Operators delegate to mmnet.ops; imported lazily to avoid a cycle.
    def __add__(self, other):
        from mmnet import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from mmnet import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from mmnet import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from mmnet import ops

        return ops.scalar_mul(self, -1.0)

    def __sub__(self, other):
        from mmnet import ops

        return ops.add(self, ops.scalar_mul(other, -1.0))


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op's forward output, recording a node when any input needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.name = None
    out._node = None
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = Node(op, inputs, backward_fn)
    if debug_enabled() and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return out


class GradientTape:
    """Nodes reachable from a scalar loss, in reverse topological order."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.order: list[Tensor] = _toposort(loss)

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    def ops(self) -> list[str]:
        return [t._node.op for t in self.order if t._node is not None]


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; grey/black marking detects cycles.
    GREY, BLACK = 1, 2
    mark: dict[int, int] = {}
    post: list[Tensor] = []
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        t, i = stack.pop()
        key = id(t)
        if i == 0:
            state = mark.get(key)
            if state == BLACK:
                continue
            if state == GREY:
                raise RuntimeError("cyclic gradient tape")
            mark[key] = GREY
        inputs = t._node.inputs if t._node is not None else ()
        if i < len(inputs):
            stack.append((t, i + 1))
            child = inputs[i]
            if child.requires_grad:
                cstate = mark.get(id(child))
                if cstate == GREY:
                    raise RuntimeError("cyclic gradient tape")
                if cstate is None:
                    stack.append((child, 0))
        else:
            mark[key] = BLACK
            post.append(t)
    post.reverse()
    return post


def backward(loss: Tensor, grad: np.ndarray | None = None) -> GradientTape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1 and grad is None:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = GradientTape(loss)
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    }
    for t in tape.order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t._node.backward_fn(g)
        for inp, ig in zip(t._node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise RuntimeError(
                    f"{t._node.op}: gradient shape {ig.shape} != input shape {inp.shape}"
                )
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig
    return tape
