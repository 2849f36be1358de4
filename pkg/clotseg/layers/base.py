"""Parameter containers and the small set of trainable building blocks."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from clotseg.core.errors import CheckpointMismatchError
from clotseg.tensor import functional as F
from clotseg.tensor.tensor import DEFAULT_DTYPE, Tensor


def parameter(data: np.ndarray, dtype: np.dtype = DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype: np.dtype = DEFAULT_DTYPE) -> Tensor:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return parameter(rng.uniform(-bound, bound, size=shape), dtype)


class Module:
    """Registers trainable tensors and sub-modules assigned as attributes, in assignment order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name: str, value: object) -> None:
        if isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._parameters.items():
            yield f"{prefix}{name}", param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(param.size for param in self.parameters())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into the parameters; any missing, extra or reshaped entry is refused."""
        own = dict(self.named_parameters())
        diff: Dict[str, Tuple[object, object]] = {}
        for name in sorted(set(own) | set(state)):
            if name not in state:
                diff[name] = ("missing", own[name].shape)
            elif name not in own:
                diff[name] = (tuple(state[name].shape), "missing")
            elif tuple(state[name].shape) != own[name].shape:
                diff[name] = (tuple(state[name].shape), own[name].shape)
        if diff:
            raise CheckpointMismatchError(diff)
        for name, param in own.items():
            param.data = np.asarray(state[name], dtype=param.dtype).copy()
            param.zero_grad()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.weight = uniform_init(rng, (in_features, out_features), in_features, dtype)
        self.bias = parameter(np.zeros(out_features), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        *,
        bias: bool = True,
        padding: str = "same",
        stride: int = 1,
        dtype: np.dtype = DEFAULT_DTYPE,
    ) -> None:
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.kernel = uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.bias: Optional[Tensor] = parameter(np.zeros(out_channels), dtype) if bias else None
        self.padding = padding
        self.stride = stride

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel, self.bias, padding=self.padding, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.gamma = parameter(np.ones(width), dtype)
        self.beta = parameter(np.zeros(width), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class MLP(Module):
    """linear, relu, linear."""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator, out_width: Optional[int] = None, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.fc1 = Linear(width, hidden, rng, dtype)
        self.fc2 = Linear(hidden, out_width or width, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(x)))


__all__ = ["Conv2d", "LayerNorm", "Linear", "MLP", "Module", "parameter", "uniform_init"]
