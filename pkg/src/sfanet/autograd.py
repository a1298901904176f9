"""Tensor storage and reverse-mode differentiation.

A ``Tensor`` wraps a contiguous numpy array. Every differentiable op in
:mod:`sfanet.ops` builds its output through :func:`make_result`, which
records a :class:`TapeNode` linking the output to its inputs when gradients
are enabled. :func:`backward` walks those nodes in reverse topological order.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_op_counters: list[Counter] = []
_check_finite = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    # maps the output gradient to one gradient (or None) per input
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the heavy lifting lives in sfanet.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


class Buffer(Tensor):
    """Non-trainable persistent state, e.g. batch-norm running statistics."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32, name: str | None = None):
        super().__init__(data, requires_grad=False, dtype=dtype, name=name)


def _not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Tally every op executed inside the block, keyed by op name."""
    counter: Counter = Counter()
    _op_counters.append(counter)
    try:
        yield counter
    finally:
        _op_counters.remove(counter)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn, **saved) -> Tensor:
    for counter in _op_counters:
        counter[op] += 1
    if _check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), backward_fn, saved)
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``root``.

    Leaf gradients accumulate across calls, matching the usual
    zero-grad-then-backward training idiom.
    """
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not require grad; nothing to differentiate")

    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(f"{t.node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
            pg = pg.astype(parent.dtype, copy=False)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            t.node = None
