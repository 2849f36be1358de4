"""Minimal reverse-mode tensor library."""

from clotseg.tensor import functional
from clotseg.tensor.gradcheck import grad_check
from clotseg.tensor.io import decode_array, encode_array, load_tensor, save_tensor
from clotseg.tensor.tensor import Function, Graph, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "Function",
    "Graph",
    "Tensor",
    "as_tensor",
    "decode_array",
    "encode_array",
    "functional",
    "grad_check",
    "is_grad_enabled",
    "load_tensor",
    "no_grad",
    "save_tensor",
]
