"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation
creates a new tensor that remembers its parents and a closure computing
the vector-Jacobian product.  :func:`backward` linearises that graph into
a :class:`Tape` (topological order) and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from affect_e2e.errors import ContractError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, metrics)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """n-dimensional array of 64-bit reals with an optional gradient.

    Leaf tensors are created by the user (parameters, inputs).  Non-leaf
    tensors are produced by operations and carry ``_parents`` plus a
    ``_backward`` closure that maps the output gradient to one gradient per
    parent (``None`` for parents that need none).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array protocol ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar; implementations live in functional -----------
    def __add__(self, other):
        from affect_e2e.autodiff import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from affect_e2e.autodiff import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from affect_e2e.autodiff import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from affect_e2e.autodiff import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from affect_e2e.autodiff import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from affect_e2e.autodiff import functional as F
        return F.div(other, self)

    def __neg__(self):
        from affect_e2e.autodiff import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from affect_e2e.autodiff import functional as F
        return F.matmul(self, other)

    def __pow__(self, exponent):
        from affect_e2e.autodiff import functional as F
        return F.power(self, exponent)

    def __getitem__(self, index):
        from affect_e2e.autodiff import functional as F
        return F.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from affect_e2e.autodiff import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from affect_e2e.autodiff import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from affect_e2e.autodiff import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from affect_e2e.autodiff import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Operations reachable from a loss, in topological order.

    Each entry is a non-leaf tensor; its inputs always appear earlier in
    ``nodes`` than the tensor itself.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; recursion overflows on long LSTM graphs
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent._backward is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients are added to any existing ``.grad`` so that several tapes can
    be reduced into the same parameters; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    if tape is None:
        tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64, copy=True).reshape(parent.shape)
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if loss._backward is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
    return tape
