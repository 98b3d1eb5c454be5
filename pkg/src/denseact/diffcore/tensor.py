"""Reverse-mode differentiable tensor on top of numpy arrays."""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def debug_enabled() -> bool:
    return getattr(_state, "debug", False)


@contextlib.contextmanager
def precision(dtype) -> Iterable[None]:
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterable[None]:
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_mode() -> Iterable[None]:
    """Raise on non-finite forward values produced from finite inputs."""
    prev = debug_enabled()
    _state.debug = True
    try:
        yield
    finally:
        _state.debug = prev


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class SequenceTooShortError(ShapeError):
    """A temporal op would produce fewer than one output step."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN/Inf."""


class Tensor:
    """Dense array with optional gradient accumulation.

    Ops record their parents and a closure that maps the upstream
    gradient to one gradient per parent (``None`` for parents that do
    not need one).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Learnable leaf tensor with a hierarchical name and a frozen flag."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        arr = np.array(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        super().__init__(arr, requires_grad=True)
        self.name = name
        self.frozen = frozen

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward result, recording history when any parent needs grad."""
    out = Tensor(data)
    out.op = op
    if debug_enabled() and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NonFiniteError(f"op '{op}' produced non-finite values from finite inputs")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients are released after use; only leaves
    (tensors without recorded history) keep ``.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss has no recorded computation history")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def first_nonfinite_op(root: Tensor) -> str | None:
    """Name the earliest op in ``root``'s history with a non-finite output.

    When that op's non-finite value came from a leaf (e.g. a corrupted
    parameter), the leaf is named too.
    """
    for node in _toposort(root):
        if node._backward is None or np.all(np.isfinite(node.data)):
            continue
        bad = [getattr(p, "name", "") or "<input>" for p in node._parents
               if p._backward is None and not np.all(np.isfinite(p.data))]
        return f"{node.op} (non-finite leaf {', '.join(bad)})" if bad else node.op
    return None
