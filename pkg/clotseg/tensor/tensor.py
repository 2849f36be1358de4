"""Dense tensor with reverse-mode gradient accumulation.

A `Tensor` wraps a numpy array. Every differentiable operation is a `Function` subclass whose
`apply` records the producing node on the output tensor; `Graph` orders those nodes
topologically and runs their backward rules in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from clotseg.core.errors import DimensionError, NonFiniteError

DEFAULT_DTYPE = np.float64
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording graph nodes (inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _as_array(data: Any, dtype: Optional[np.dtype] = None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _check_finite(arr: np.ndarray, origin: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{origin} produced non-finite values (NaN/Inf)")


class Function:
    """Base class for differentiable operations.

    `forward` receives the raw arrays of the inputs and returns the output array; `backward`
    receives dL/d(output) and returns one gradient (or None) per input, in input order.
    """

    def __init__(self, *inputs: "Tensor") -> None:
        self.inputs: Tuple["Tensor", ...] = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        _check_finite(out, cls.__name__)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=fn if requires_grad else None, _checked=True)


class Tensor:
    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        creator: Optional[Function] = None,
        dtype: Optional[np.dtype] = None,
        _checked: bool = False,
    ) -> None:
        self.data: np.ndarray = _as_array(data, dtype)
        if not _checked:
            _check_finite(self.data, "Tensor construction")
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    # -- metadata -----------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _checked=True)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd -----------------------------------------------------------------------
    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise DimensionError(f"Gradient shape {grad.shape} does not match tensor shape {self.shape}")
        self.grad = grad.astype(self.dtype, copy=True) if self.grad is None else self.grad + grad

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        if not self.requires_grad:
            return
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar output, got shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = _as_array(grad, self.dtype)
        Graph.from_output(self).backward(seed)

    # -- operators ----------------------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        from clotseg.tensor import functional as F

        return F.add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return self.__add__(other)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        from clotseg.tensor import functional as F

        return F.sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        from clotseg.tensor import functional as F

        return F.affine(self, scale=-1.0, shift=float(other)) if _is_number(other) else F.sub(as_tensor(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        from clotseg.tensor import functional as F

        return F.mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        from clotseg.tensor import functional as F

        return F.div(self, other)

    def __neg__(self) -> "Tensor":
        from clotseg.tensor import functional as F

        return F.affine(self, scale=-1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from clotseg.tensor import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from clotseg.tensor import functional as F

        return F.getitem(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        from clotseg.tensor import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        from clotseg.tensor import functional as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
        return self.transpose(axes)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from clotseg.tensor import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from clotseg.tensor import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, bool)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Graph:
    """Recorded operation nodes reachable from one output, in execution (topological) order."""

    def __init__(self, nodes: List[Tensor]) -> None:
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited: set[int] = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in reversed(node.creator.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        output = self.nodes[-1]
        output.grad = seed.astype(output.dtype, copy=True)
        for node in reversed(self.nodes):
            fn = node.creator
            if fn is None or node.grad is None:
                continue
            grads = fn.backward(node.grad)
            for parent, grad in zip(fn.inputs, grads):
                if grad is not None and parent.requires_grad:
                    parent.accumulate_grad(grad)
