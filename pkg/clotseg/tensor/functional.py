"""Differentiable primitives used by the fusion block, the Logic-LSTM and the loss."""

from __future__ import annotations

from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from clotseg.core.errors import DimensionError
from clotseg.tensor.tensor import ArrayLike, Function, Tensor, _is_number, as_tensor

Axis = Optional[Union[int, Tuple[int, ...]]]


def _scalar_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# ---------------------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------------------
class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _scalar_broadcast(a, b, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _scalar_broadcast(a, b, "sub")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _scalar_broadcast(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray):
        return _reduce_to(grad * self.b, self.a.shape), _reduce_to(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _scalar_broadcast(a, b, "div")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray):
        return (
            _reduce_to(grad / self.b, self.a.shape),
            _reduce_to(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Affine(Function):
    """y = scale * x + shift with constant scale and shift."""

    def forward(self, x: np.ndarray, scale: float = 1.0, shift: float = 0.0) -> np.ndarray:
        self.scale = scale
        return x * scale + shift

    def backward(self, grad: np.ndarray):
        return (grad * self.scale,)


class Log(Function):
    def forward(self, x: np.ndarray, floor: float = 1e-12) -> np.ndarray:
        self.mask = x > floor
        self.clipped = np.maximum(x, floor)
        return np.log(self.clipped)

    def backward(self, grad: np.ndarray):
        return (np.where(self.mask, grad / self.clipped, 0.0),)


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad: np.ndarray):
        return (grad * self.mask,)


class Elu(Function):
    def forward(self, x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
        self.x = x
        self.alpha = alpha
        self.neg = alpha * np.expm1(np.minimum(x, 0.0))
        return np.where(x > 0, x, self.neg)

    def backward(self, grad: np.ndarray):
        return (grad * np.where(self.x > 0, 1.0, self.neg + self.alpha),)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad: np.ndarray):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad: np.ndarray):
        return (grad * (1.0 - self.out**2),)


# ---------------------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------------------
def _sum_to_batch(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Undo leading-dimension broadcasting of a batched matmul operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape[:-2]):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError as exc:
            raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from exc
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _sum_to_batch(grad_a, self.a.shape), _sum_to_batch(grad_b, self.b.shape)


class Linear(Function):
    """y = x @ W + b over the last axis of x."""

    def forward(self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
        if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
        self.x, self.weight = x, weight
        return x @ weight + bias

    def backward(self, grad: np.ndarray):
        flat_x = self.x.reshape(-1, self.x.shape[-1])
        flat_g = grad.reshape(-1, grad.shape[-1])
        return grad @ self.weight.T, flat_x.T @ flat_g, flat_g.sum(axis=0)


# ---------------------------------------------------------------------------------------
# spatial operators on (C, H, W) planes
# ---------------------------------------------------------------------------------------
class Conv2d(Function):
    """Cross-correlation of a (C, H, W) plane with an (O, C, kh, kw) kernel."""

    def forward(
        self,
        x: np.ndarray,
        kernel: np.ndarray,
        bias: Optional[np.ndarray] = None,
        padding: str = "same",
        stride: int = 1,
    ) -> np.ndarray:
        if stride < 1:
            raise DimensionError(f"conv2d: stride must be positive, got {stride}")
        if x.ndim != 3 or kernel.ndim != 4:
            raise DimensionError(f"conv2d: expected (C,H,W) input and (O,C,k,k) kernel, got {x.shape} and {kernel.shape}")
        out_ch, in_ch, kh, kw = kernel.shape
        if x.shape[0] != in_ch:
            raise DimensionError(f"conv2d: input has {x.shape[0]} channels, kernel expects {in_ch}")
        if padding == "same":
            if kh % 2 == 0 or kw % 2 == 0:
                raise DimensionError(f"conv2d: same padding needs odd kernel sizes, got {kh}x{kw}")
            pad_h, pad_w = kh // 2, kw // 2
        elif padding == "valid":
            pad_h = pad_w = 0
        else:
            raise ValueError(f"conv2d: unknown padding {padding!r}")
        _, height, width = x.shape
        padded = np.pad(x, ((0, 0), (pad_h, pad_h), (pad_w, pad_w)))
        if padded.shape[1] < kh or padded.shape[2] < kw:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {padded.shape[1:]}")
        windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        out_h, out_w = windows.shape[1], windows.shape[2]
        cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, in_ch * kh * kw)
        kmat = kernel.reshape(out_ch, -1)
        out = (cols @ kmat.T).T.reshape(out_ch, out_h, out_w)
        if bias is not None:
            out = out + bias[:, None, None]
        self.cols, self.kmat = cols, kmat
        self.geometry = (x.shape, kernel.shape, pad_h, pad_w, stride, out_h, out_w)
        self.has_bias = bias is not None
        return out

    def backward(self, grad: np.ndarray):
        x_shape, k_shape, pad_h, pad_w, stride, out_h, out_w = self.geometry
        out_ch, in_ch, kh, kw = k_shape
        gmat = grad.reshape(out_ch, -1).T
        grad_kernel = (gmat.T @ self.cols).reshape(k_shape)
        gcols = (gmat @ self.kmat).reshape(out_h, out_w, in_ch, kh, kw)
        grad_padded = np.zeros((in_ch, x_shape[1] + 2 * pad_h, x_shape[2] + 2 * pad_w), dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += gcols[:, :, :, i, j].transpose(2, 0, 1)
        grad_x = grad_padded[:, pad_h : pad_h + x_shape[1], pad_w : pad_w + x_shape[2]]
        grads: List[Optional[np.ndarray]] = [grad_x, grad_kernel]
        if self.has_bias:
            grads.append(grad.sum(axis=(1, 2)))
        return tuple(grads)


class MaxPoolWindow(Function):
    """Stride-1 w x w sliding maximum with -inf padding; output keeps the input shape.

    The window at (i, j) covers rows i-(w-1)//2 .. i+w//2 (and likewise columns). The max is
    taken separably, along each row first, so the routed source is the first maximal element in
    row-major order within the window.
    """

    def forward(self, x: np.ndarray, window: int = 1) -> np.ndarray:
        if window < 1:
            raise DimensionError(f"maxpool_window: window must be >= 1, got {window}")
        if x.ndim != 3:
            raise DimensionError(f"maxpool_window: expected (C,H,W), got {x.shape}")
        self.shape = x.shape
        channels, height, width = x.shape
        lo, hi = (window - 1) // 2, window // 2
        ii = np.arange(height)[None, :, None]
        jj = np.arange(width)[None, None, :]
        cc = np.arange(channels)[:, None, None]

        padded = np.pad(x, ((0, 0), (0, 0), (lo, hi)), constant_values=-np.inf)
        col_windows = sliding_window_view(padded, window, axis=2)
        col_arg = col_windows.argmax(axis=-1)
        row_max = np.take_along_axis(col_windows, col_arg[..., None], axis=-1)[..., 0]

        padded_rows = np.pad(row_max, ((0, 0), (lo, hi), (0, 0)), constant_values=-np.inf)
        row_windows = sliding_window_view(padded_rows, window, axis=1)
        row_arg = row_windows.argmax(axis=-1)
        out = np.take_along_axis(row_windows, row_arg[..., None], axis=-1)[..., 0]

        src_row = ii - lo + row_arg
        src_col = jj - lo + col_arg[cc, src_row, jj]
        self.source = ((cc * height + src_row) * width + src_col).ravel()
        return out

    def backward(self, grad: np.ndarray):
        flat = np.bincount(self.source, weights=grad.ravel(), minlength=int(np.prod(self.shape)))
        return (flat.reshape(self.shape).astype(grad.dtype, copy=False),)


class ResizeNearest(Function):
    def forward(self, x: np.ndarray, factor: int = 1) -> np.ndarray:
        if factor < 1:
            raise DimensionError(f"resize_nearest: factor must be >= 1, got {factor}")
        if x.ndim != 3:
            raise DimensionError(f"resize_nearest: expected (C,H,W), got {x.shape}")
        self.factor = factor
        return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)

    def backward(self, grad: np.ndarray):
        f = self.factor
        c, h, w = grad.shape
        return (grad.reshape(c, h // f, f, w // f, f).sum(axis=(2, 4)),)


# ---------------------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------------------
class SoftmaxLastDim(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 0 or x.shape[-1] < 1:
            raise DimensionError(f"softmax_lastdim: needs a non-empty last axis, got {x.shape}")
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        self.out = shifted / shifted.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray):
        inner = (grad * self.out).sum(axis=-1, keepdims=True)
        return (self.out * (grad - inner),)


class LayerNorm(Function):
    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
            raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last axis of {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad: np.ndarray):
        n = self.xhat.shape[-1]
        gxhat = grad * self.gamma
        grad_x = (
            self.inv_std
            / n
            * (n * gxhat - gxhat.sum(axis=-1, keepdims=True) - self.xhat * (gxhat * self.xhat).sum(axis=-1, keepdims=True))
        )
        lead = tuple(range(grad.ndim - 1))
        return grad_x, (grad * self.xhat).sum(axis=lead), grad.sum(axis=lead)


# ---------------------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------------------
class Reshape(Function):
    def forward(self, x: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def backward(self, grad: np.ndarray):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x: np.ndarray, axes: Optional[Sequence[int]] = None) -> np.ndarray:
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad: np.ndarray):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise DimensionError(f"concat: shapes {[a.shape for a in arrays]} disagree off axis {axis}") from exc

    def backward(self, grad: np.ndarray):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        self.axis = axis
        try:
            return np.stack(arrays, axis=axis)
        except ValueError as exc:
            raise DimensionError(f"stack: shapes {[a.shape for a in arrays]} differ") from exc

    def backward(self, grad: np.ndarray):
        return tuple(np.moveaxis(grad, self.axis, 0))


class GetItem(Function):
    def forward(self, x: np.ndarray, index: Any = None) -> np.ndarray:
        self.shape, self.index = x.shape, index
        return x[index]

    def backward(self, grad: np.ndarray):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


class Sum(Function):
    def forward(self, x: np.ndarray, axis: Axis = None, keepdims: bool = False) -> np.ndarray:
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


# ---------------------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    if _is_number(b):
        return Affine.apply(as_tensor(a), shift=float(b))
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    if _is_number(b):
        return Affine.apply(as_tensor(a), shift=-float(b))
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    if _is_number(b):
        return Affine.apply(as_tensor(a), scale=float(b))
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    if _is_number(b):
        return Affine.apply(as_tensor(a), scale=1.0 / float(b))
    return Div.apply(as_tensor(a), as_tensor(b))


def affine(x: Tensor, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    return Affine.apply(x, scale=scale, shift=shift)


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    return Log.apply(x, floor=floor)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    return Elu.apply(x, alpha=alpha)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    padding: str = "same",
    stride: int = 1,
) -> Tensor:
    tensors = (x, kernel) if bias is None else (x, kernel, bias)
    return Conv2d.apply(*tensors, padding=padding, stride=stride)


def maxpool_window(x: Tensor, window: int) -> Tensor:
    return MaxPoolWindow.apply(x, window=window)


def resize_nearest(x: Tensor, factor: int) -> Tensor:
    return ResizeNearest.apply(x, factor=factor)


def softmax_lastdim(x: Tensor) -> Tensor:
    return SoftmaxLastDim.apply(x)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    width = x.shape[-1]
    gamma = gamma if gamma is not None else Tensor(np.ones(width, dtype=x.dtype))
    beta = beta if beta is not None else Tensor(np.zeros(width, dtype=x.dtype))
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(x, axes=axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def getitem(x: Tensor, index: Any) -> Tensor:
    return GetItem.apply(x, index=index)


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return affine(sum(x, axis=axis, keepdims=keepdims), scale=1.0 / count)
