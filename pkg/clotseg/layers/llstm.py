"""Logic-LSTM recurrence over the slice axis.

Hidden and cell fields are split into a convolution part (``n_c`` channels) and a logic part
(``n_l`` channels). The logic part is mixed by 1x1 convolutions and widened by the multi-window
transfer pooling instead of full ``w x w`` convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from clotseg.config.settings import LLSTMConfig
from clotseg.core.errors import DimensionError
from clotseg.layers.base import Conv2d, Module
from clotseg.tensor import functional as F
from clotseg.tensor.tensor import DEFAULT_DTYPE, Tensor

NUM_CLASSES = 2
GATES = ("i", "f", "g", "o")


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor
    n_c: int

    def __post_init__(self) -> None:
        if self.h.shape != self.c.shape or self.h.ndim != 3:
            raise DimensionError(f"Recurrent state fields disagree: h {self.h.shape}, c {self.c.shape}")
        if not 0 <= self.n_c <= self.h.shape[0]:
            raise DimensionError(f"Convolution split {self.n_c} outside {self.h.shape[0]} channels")

    @classmethod
    def zeros(cls, n_c: int, n_l: int, n1: int, dtype: np.dtype = DEFAULT_DTYPE) -> "RecurrentState":
        blank = np.zeros((n_c + n_l, n1, n1), dtype=dtype)
        return cls(Tensor(blank), Tensor(blank.copy()), n_c)

    @property
    def h1(self) -> Tensor:
        return self.h[: self.n_c]

    @property
    def h2(self) -> Tensor:
        return self.h[self.n_c :]

    @property
    def c1(self) -> Tensor:
        return self.c[: self.n_c]

    @property
    def c2(self) -> Tensor:
        return self.c[self.n_c :]


def transfer(x: Tensor, m: int, windows: Sequence[int]) -> Tensor:
    """Group i of m consecutive channels is max-pooled with window windows[i]."""
    channels = x.shape[0]
    if m < 1 or channels % m:
        raise DimensionError(f"transfer: m={m} does not divide {channels} channels")
    if channels // m != len(windows):
        raise DimensionError(f"transfer: {channels // m} channel groups but {len(windows)} windows")
    groups = [F.maxpool_window(x[i * m : (i + 1) * m], window) for i, window in enumerate(windows)]
    return groups[0] if len(groups) == 1 else F.concat(groups, axis=0)


class LogicCell(Module):
    def __init__(self, cfg: LLSTMConfig, d_k: int, n1: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.cfg = cfg
        self.d_k = d_k
        self.windows = cfg.windows(n1)
        conv_in = 2 * cfg.n_c + d_k
        self.l1 = Conv2d(conv_in, 4 * cfg.n_c, cfg.w, rng, dtype=dtype)
        self.l2 = Conv2d(2 * cfg.n_l, 4 * cfg.n_c, 1, rng, bias=False, dtype=dtype)
        self.l3 = Conv2d(conv_in, cfg.n_l, cfg.w, rng, dtype=dtype)
        self.l4 = Conv2d(3 * cfg.n_l, 4 * cfg.n_l, 1, rng, dtype=dtype)
        self.l1.bias.data[cfg.n_c : 2 * cfg.n_c] = cfg.forget_bias
        self.l4.bias.data[cfg.n_l : 2 * cfg.n_l] = cfg.forget_bias

    def forward(self, state: RecurrentState, x_t: Tensor) -> RecurrentState:
        return cell_step(state, x_t, self)


def logic(a_c: Tensor, a_l: Tensor, cell: LogicCell) -> Tensor:
    """a1 = L1(A_c) + L2(A_l); a2 = L4(T(L3(A_c)) || A_l); returns a1 || a2."""
    cfg = cell.cfg
    if a_c.shape[0] != 2 * cfg.n_c + cell.d_k:
        raise DimensionError(f"logic: A_c has {a_c.shape[0]} channels, expected {2 * cfg.n_c + cell.d_k}")
    if a_l.shape[0] != 2 * cfg.n_l:
        raise DimensionError(f"logic: A_l has {a_l.shape[0]} channels, expected {2 * cfg.n_l}")
    a1 = cell.l1(a_c) + cell.l2(a_l)
    pooled = transfer(cell.l3(a_c), cfg.m, cell.windows)
    a2 = cell.l4(F.concat([pooled, a_l], axis=0))
    return F.concat([a1, a2], axis=0)


def _gate(pre: Tensor, index: int, n_c: int, n_l: int) -> Tensor:
    conv_part = pre[index * n_c : (index + 1) * n_c]
    offset = 4 * n_c
    logic_part = pre[offset + index * n_l : offset + (index + 1) * n_l]
    return F.concat([conv_part, logic_part], axis=0)


def cell_step(state: RecurrentState, x_t: Tensor, cell: LogicCell) -> RecurrentState:
    cfg = cell.cfg
    if x_t.shape[0] != cell.d_k or x_t.shape[1:] != state.h.shape[1:]:
        raise DimensionError(f"cell_step: slice features {x_t.shape} do not fit state {state.h.shape} with d_k={cell.d_k}")
    a_c = F.concat([state.c1, state.h1, x_t], axis=0)
    a_l = F.concat([state.c2, state.h2], axis=0)
    pre = logic(a_c, a_l, cell)
    i, f, g, o = (_gate(pre, index, cfg.n_c, cfg.n_l) for index in range(len(GATES)))
    c_next = F.sigmoid(f) * state.c + F.sigmoid(i) * F.tanh(g)
    h_next = F.sigmoid(o) * F.tanh(c_next)
    return RecurrentState(h_next, c_next, cfg.n_c)


class LogicLSTM(Module):
    """Logic cell plus the 1x1 two-class head, run as a double pass over the slices."""

    def __init__(self, cfg: LLSTMConfig, d_k: int, n1: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.cfg = cfg
        self.n1 = n1
        self.dtype = dtype
        self.cell = LogicCell(cfg, d_k, n1, rng, dtype)
        self.head = Conv2d(cfg.hidden, NUM_CLASSES, 1, rng, dtype=dtype)

    def initial_state(self) -> RecurrentState:
        return RecurrentState.zeros(self.cfg.n_c, self.cfg.n_l, self.n1, self.dtype)

    def forward(self, seq: Sequence[Tensor]) -> Tensor:
        return run_sequence(seq, self)


def record_states(seq: Sequence[Tensor], lstm: LogicLSTM) -> List[RecurrentState]:
    """First pass from a zero state; entry t is the state after consuming slice t."""
    state = lstm.initial_state()
    recorded: List[RecurrentState] = []
    for x_t in seq:
        state = cell_step(state, x_t, lstm.cell)
        recorded.append(state)
    return recorded


def sequence_logits(seq: Sequence[Tensor], lstm: LogicLSTM) -> List[Tensor]:
    """Second pass: step t starts from recorded state t; returns (2, n1, n1) logits per slice."""
    if not seq:
        raise DimensionError("run_sequence needs at least one slice")
    recorded = record_states(seq, lstm)
    return [lstm.head(cell_step(seed, x_t, lstm.cell).h) for seed, x_t in zip(recorded, seq)]


def run_sequence(seq: Sequence[Tensor], lstm: LogicLSTM) -> Tensor:
    """Foreground probability of shape (n1, n1, s)."""
    probs = [F.softmax_lastdim(logits.transpose(1, 2, 0))[:, :, 1] for logits in sequence_logits(seq, lstm)]
    return F.stack(probs, axis=2)


def logic_cell_parameter_count(cfg: LLSTMConfig, d_k: int) -> int:
    conv_in = 2 * cfg.n_c + d_k
    l1 = cfg.w * cfg.w * conv_in * 4 * cfg.n_c + 4 * cfg.n_c
    l2 = 2 * cfg.n_l * 4 * cfg.n_c
    l3 = cfg.w * cfg.w * conv_in * cfg.n_l + cfg.n_l
    l4 = 3 * cfg.n_l * 4 * cfg.n_l + 4 * cfg.n_l
    return l1 + l2 + l3 + l4


def convlstm_parameter_count(cfg: LLSTMConfig, d_k: int) -> int:
    """Cell with every gate computed by one w x w convolution over c || h || x."""
    hidden = cfg.hidden
    return cfg.w * cfg.w * (2 * hidden + d_k) * 4 * hidden + 4 * hidden


def parameter_budget(cfg: LLSTMConfig, d_k: int) -> Tuple[int, int]:
    return logic_cell_parameter_count(cfg, d_k), convlstm_parameter_count(cfg, d_k)


__all__ = [
    "LogicCell",
    "LogicLSTM",
    "RecurrentState",
    "cell_step",
    "convlstm_parameter_count",
    "logic",
    "logic_cell_parameter_count",
    "parameter_budget",
    "record_states",
    "run_sequence",
    "sequence_logits",
    "transfer",
]
