"""Finite-difference checks for every differentiable layer, small enough to run on a laptop."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from clotseg.config.settings import FusionConfig, LLSTMConfig, ModelConfig
from clotseg.core.logger import get_logger
from clotseg.layers.base import LayerNorm, parameter
from clotseg.layers.fusion import CrossAttention, FusionBlock, TokenGrid, cross_attention
from clotseg.layers.llstm import LogicCell, RecurrentState, cell_step, logic, transfer
from clotseg.layers.upattllstm import UpAttLLSTM, loss
from clotseg.models.schemas import Crop
from clotseg.tensor import functional as F
from clotseg.tensor.gradcheck import grad_check
from clotseg.tensor.tensor import Tensor

logger = get_logger(__name__)

TOLERANCE = 1e-4
DESK_FUSION = FusionConfig(n1=16, p1=8, p2=2, d_k=4, mlp_hidden=4)
DESK_LLSTM = LLSTMConfig(n_c=2, n_l=2, m=1, w=3)
DESK_MODEL = ModelConfig(s=2)

Check = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], Sequence[Tensor], Optional[int]]]


@dataclass
class GradCheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=out.shape))
    return lambda y: (y * weights).sum()


def _elementwise(op: Callable[[Tensor], Tensor]) -> Check:
    def build(rng):
        x = parameter(rng.normal(size=(3, 4)))
        proj = _project(op(x), rng)
        return (lambda: proj(op(x))), [x], None

    return build


def _square_sum(rng):
    x = parameter(rng.normal(size=(4, 3)))
    return (lambda: (x * x).sum()), [x], None


def _matmul(rng):
    a = parameter(rng.normal(size=(2, 3, 4)))
    b = parameter(rng.normal(size=(4, 5)))
    proj = _project(a @ b, rng)
    return (lambda: proj(a @ b)), [a, b], None


def _conv(padding: str, stride: int, kernel: int) -> Check:
    def build(rng):
        x = parameter(rng.normal(size=(2, 6, 6)))
        k = parameter(rng.normal(size=(3, 2, kernel, kernel)))
        b = parameter(rng.normal(size=3))
        fn = lambda: F.conv2d(x, k, b, padding=padding, stride=stride)  # noqa: E731
        proj = _project(fn(), rng)
        return (lambda: proj(fn())), [x, k, b], None

    return build


def _maxpool(window: int) -> Check:
    def build(rng):
        x = parameter(rng.normal(size=(2, 6, 6)))
        proj = _project(F.maxpool_window(x, window), rng)
        return (lambda: proj(F.maxpool_window(x, window))), [x], None

    return build


def _layer_norm(rng):
    x = parameter(rng.normal(size=(5, 4)))
    norm = LayerNorm(4)
    norm.gamma.data = rng.normal(size=4)
    norm.beta.data = rng.normal(size=4)
    proj = _project(norm(x), rng)
    return (lambda: proj(norm(x))), [x, norm.gamma, norm.beta], None


def _resize(rng):
    x = parameter(rng.normal(size=(2, 3, 3)))
    proj = _project(F.resize_nearest(x, 2), rng)
    return (lambda: proj(F.resize_nearest(x, 2))), [x], None


def _attention(rng):
    attn = CrossAttention(3, 3, rng)
    q = parameter(rng.normal(size=(2, 3)))
    kv = parameter(rng.normal(size=(2, 3)))
    fn = lambda: cross_attention(TokenGrid(q, 1), TokenGrid(kv, 1), attn).tokens  # noqa: E731
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [q, kv, *attn.parameters()], None


def _fusion(rng):
    block = FusionBlock(DESK_FUSION, rng)
    dwi = Tensor(rng.normal(size=(1, 16, 16)))
    sp = Tensor(rng.normal(size=(2, 16, 16)))
    proj = _project(block(dwi, sp), rng)
    return (lambda: proj(block(dwi, sp))), block.parameters(), 4


def _desk_cell(rng) -> Tuple[LogicCell, RecurrentState, Tensor]:
    cell = LogicCell(DESK_LLSTM, 3, 4, rng)
    h = parameter(rng.normal(size=(4, 4, 4)) * 0.5)
    c = parameter(rng.normal(size=(4, 4, 4)) * 0.5)
    x = parameter(rng.normal(size=(3, 4, 4)))
    return cell, RecurrentState(h, c, DESK_LLSTM.n_c), x


def _transfer(rng):
    x = parameter(rng.normal(size=(4, 5, 5)))
    proj = _project(transfer(x, 2, [5, 2]), rng)
    return (lambda: proj(transfer(x, 2, [5, 2]))), [x], None


def _logic(rng):
    cell, state, x = _desk_cell(rng)
    fn = lambda: logic(F.concat([state.c1, state.h1, x], axis=0), F.concat([state.c2, state.h2], axis=0), cell)  # noqa: E731
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [state.h, state.c, x, *cell.parameters()], None


def _cell_step(rng):
    cell, state, x = _desk_cell(rng)
    def fn() -> Tensor:
        nxt = cell_step(state, x, cell)
        return F.concat([nxt.h, nxt.c], axis=0)

    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [state.h, state.c, x, *cell.parameters()], None


def _model_loss(rng):
    model = UpAttLLSTM(DESK_FUSION, DESK_LLSTM, DESK_MODEL, rng)
    planes = rng.normal(size=(3, 16, 16, 2)).astype(np.float32)
    gt = np.zeros((16, 16, 2), dtype=bool)
    gt[6:9, 7:10, :] = True
    crop = Crop(dwi=planes[0], swan=planes[1], phase=planes[2], gt=gt, contains_target=True)
    return (lambda: loss(model(crop), crop.gt)), model.parameters(), 3


CHECKS: List[Tuple[str, Check]] = [
    ("square_sum", _square_sum),
    ("matmul", _matmul),
    ("conv2d_same", _conv("same", 1, 3)),
    ("conv2d_patch", _conv("valid", 2, 2)),
    ("maxpool_window_2", _maxpool(2)),
    ("maxpool_window_3", _maxpool(3)),
    ("softmax", _elementwise(F.softmax_lastdim)),
    ("layer_norm", _layer_norm),
    ("resize_nearest", _resize),
    ("elu", _elementwise(F.elu)),
    ("sigmoid", _elementwise(F.sigmoid)),
    ("tanh", _elementwise(F.tanh)),
    ("log", _elementwise(lambda x: F.log(x * x + 0.5))),
    ("attention_two_token", _attention),
    ("fusion_block", _fusion),
    ("transfer", _transfer),
    ("logic", _logic),
    ("cell_step", _cell_step),
    ("model_loss", _model_loss),
]


def run_suite(seed: int = 0, names: Optional[Sequence[str]] = None, h: float = 1e-5) -> List[GradCheckResult]:
    results: List[GradCheckResult] = []
    for name, build in CHECKS:
        if names and name not in names:
            continue
        rng = np.random.default_rng(seed)
        started = time.perf_counter()
        fn, params, coords = build(rng)
        error = grad_check(fn, list(params), h=h, coords_per_param=coords, seed=seed)
        results.append(GradCheckResult(name, error, time.perf_counter() - started))
        logger.info("gradcheck %-20s error=%.3e %s", name, error, "ok" if error < TOLERANCE else "FAIL")
    return results


__all__ = ["CHECKS", "GradCheckResult", "TOLERANCE", "run_suite"]
