"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from clotseg.core.errors import GradCheckError
from clotseg.core.logger import get_logger
from clotseg.tensor.tensor import Tensor

logger = get_logger(__name__)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def _evaluate(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.size != 1:
        raise GradCheckError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    return out.item()


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    coords_per_param: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Return max |a - n| / max(1, |a|, |n|) over the probed coordinates of every parameter.

    ``f`` is a closure that rebuilds the graph from the current parameter values. When
    ``coords_per_param`` is set, only that many coordinates (sampled without replacement)
    are probed per parameter; otherwise every coordinate is.
    """
    for param in params:
        if param.dtype != np.float64:
            raise GradCheckError(f"grad_check needs float64 parameters, got {param.dtype}")
        param.zero_grad()

    out = f()
    if out.size != 1:
        raise GradCheckError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    out.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for index, param in enumerate(params):
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        flat_count = param.size
        if coords_per_param is not None and coords_per_param < flat_count:
            coords = np.sort(rng.choice(flat_count, size=coords_per_param, replace=False))
        else:
            coords = np.arange(flat_count)

        original = param.data
        numeric = np.empty(len(coords))
        for slot, coord in enumerate(coords):
            probe = original.copy()
            flat = probe.reshape(-1)
            base = flat[coord]
            flat[coord] = base + h
            param.data = probe
            plus = _evaluate(f)
            flat[coord] = base - h
            minus = _evaluate(f)
            numeric[slot] = (plus - minus) / (2.0 * h)
        param.data = original

        error = _relative_error(analytic.reshape(-1)[coords], numeric)
        logger.debug("grad_check param %d shape=%s probed=%d error=%.3e", index, param.shape, len(coords), error)
        worst = max(worst, error)
    return worst
