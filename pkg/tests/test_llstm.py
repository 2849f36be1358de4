import numpy as np
import pytest

from clotseg.config.settings import LLSTMConfig
from clotseg.core.errors import DimensionError
from clotseg.layers.llstm import (
    LogicCell,
    LogicLSTM,
    RecurrentState,
    cell_step,
    convlstm_parameter_count,
    logic,
    logic_cell_parameter_count,
    record_states,
    run_sequence,
    sequence_logits,
    transfer,
)
from clotseg.tensor import functional as F
from clotseg.tensor.gradcheck import grad_check
from clotseg.tensor.tensor import Tensor

DESK = LLSTMConfig(n_c=2, n_l=2, m=1, w=3)


def _zero(module):
    for param in module.parameters():
        param.data = np.zeros_like(param.data)


def _brute_max(plane: np.ndarray, window: int) -> np.ndarray:
    lo, hi = (window - 1) // 2, window // 2
    out = np.empty_like(plane)
    for i in range(plane.shape[0]):
        for j in range(plane.shape[1]):
            out[i, j] = plane[max(0, i - lo) : i + hi + 1, max(0, j - lo) : j + hi + 1].max()
    return out


def test_windows_follow_halving_powers():
    assert LLSTMConfig(n_c=4, n_l=9, m=3).windows(256) == [256, 128, 64]
    assert LLSTMConfig(n_c=4, n_l=6, m=3).windows(4) == [4, 2]


def test_transfer_identity_with_unit_windows(rng):
    x = Tensor(rng.normal(size=(6, 5, 5)))
    np.testing.assert_array_equal(transfer(x, 3, [1, 1]).data, x.data)


def test_transfer_groups_match_brute_force(rng):
    x = rng.normal(size=(6, 8, 8))
    out = transfer(Tensor(x), 3, [8, 4]).data
    for channel in range(6):
        window = 8 if channel < 3 else 4
        np.testing.assert_array_equal(out[channel], _brute_max(x[channel], window))


def test_transfer_whole_plane_window_spreads_the_peak():
    x = np.zeros((1, 4, 4))
    x[0, 1, 2] = 3.0
    np.testing.assert_array_equal(transfer(Tensor(x), 1, [8]).data, np.full((1, 4, 4), 3.0))


def test_transfer_rejects_indivisible_groups():
    with pytest.raises(DimensionError):
        transfer(Tensor(np.zeros((5, 4, 4))), 3, [4])


def test_logic_zero_parameters_give_zero_output(rng):
    cell = LogicCell(DESK, 3, 4, rng)
    _zero(cell)
    out = logic(Tensor(rng.normal(size=(7, 4, 4))), Tensor(rng.normal(size=(4, 4, 4))), cell)
    assert out.shape == (4 * (DESK.n_c + DESK.n_l), 4, 4)
    assert not out.data.any()


def test_logic_is_linear_in_logic_part_when_only_l2_is_set(rng):
    cell = LogicCell(DESK, 3, 4, rng)
    kept = cell.l2.kernel.data.copy()
    _zero(cell)
    cell.l2.kernel.data = kept
    a_c = Tensor(rng.normal(size=(7, 4, 4)))
    a_l = rng.normal(size=(4, 4, 4))
    once = logic(a_c, Tensor(a_l), cell).data
    twice = logic(a_c, Tensor(2.0 * a_l), cell).data
    np.testing.assert_allclose(twice, 2.0 * once, atol=1e-12)


def test_forget_gate_bias_starts_at_one(rng):
    cell = LogicCell(DESK, 3, 4, rng)
    np.testing.assert_array_equal(cell.l1.bias.data[DESK.n_c : 2 * DESK.n_c], 1.0)
    np.testing.assert_array_equal(cell.l4.bias.data[DESK.n_l : 2 * DESK.n_l], 1.0)
    assert cell.l2.bias is None


def test_cell_step_closed_form_with_zero_parameters(rng):
    cell = LogicCell(DESK, 3, 4, rng)
    _zero(cell)
    zero = RecurrentState.zeros(DESK.n_c, DESK.n_l, 4)
    blank = cell_step(zero, Tensor(np.zeros((3, 4, 4))), cell)
    assert not blank.h.data.any() and not blank.c.data.any()

    c0 = rng.normal(size=(4, 4, 4))
    state = RecurrentState(Tensor(np.zeros((4, 4, 4))), Tensor(c0), DESK.n_c)
    nxt = cell_step(state, Tensor(np.zeros((3, 4, 4))), cell)
    np.testing.assert_allclose(nxt.c.data, 0.5 * c0, atol=1e-15)
    np.testing.assert_allclose(nxt.h.data, 0.5 * np.tanh(0.5 * c0), atol=1e-15)


def test_state_shapes_are_stable(rng):
    cell = LogicCell(DESK, 3, 4, rng)
    state = RecurrentState.zeros(DESK.n_c, DESK.n_l, 4)
    for _ in range(10):
        state = cell_step(state, Tensor(rng.normal(size=(3, 4, 4))), cell)
        assert state.h.shape == state.c.shape == (4, 4, 4)
        assert state.h1.shape[0] == DESK.n_c and state.c2.shape[0] == DESK.n_l


def test_cell_step_gradients(rng):
    cell = LogicCell(DESK, 3, 4, rng)
    h = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)

    def fn():
        out = cell_step(RecurrentState(h, c, DESK.n_c), x, cell)
        return (out.h * out.h).sum() + out.c.sum()

    assert grad_check(fn, [h, c, x, *cell.parameters()], coords_per_param=4) < 1e-4


def test_single_slice_second_pass_starts_from_recorded_state(rng):
    lstm = LogicLSTM(DESK, 3, 4, rng)
    seq = [Tensor(rng.normal(size=(3, 4, 4)))]
    recorded = record_states(seq, lstm)
    expected = lstm.head(cell_step(recorded[0], seq[0], lstm.cell).h)
    logits = sequence_logits(seq, lstm)
    assert logits[0].shape == (2, 4, 4)
    np.testing.assert_array_equal(logits[0].data, expected.data)


def test_run_sequence_probabilities(rng):
    lstm = LogicLSTM(DESK, 3, 4, rng)
    seq = [Tensor(rng.normal(size=(3, 4, 4))) for _ in range(3)]
    prob = run_sequence(seq, lstm)
    assert prob.shape == (4, 4, 3)
    assert prob.data.min() >= 0.0 and prob.data.max() <= 1.0
    two_class = F.softmax_lastdim(sequence_logits(seq, lstm)[1].transpose(1, 2, 0)).data
    np.testing.assert_allclose(two_class.sum(axis=-1), 1.0)
    assert run_sequence(seq, lstm).data.tobytes() == prob.data.tobytes()
    with pytest.raises(DimensionError):
        run_sequence([], lstm)


@pytest.mark.parametrize(
    "cfg,d_k",
    [(LLSTMConfig(n_c=4, n_l=9, m=3), 32), (DESK, 4), (LLSTMConfig(n_c=4, n_l=6, m=3), 16)],
)
def test_logic_cell_is_smaller_than_convlstm(rng, cfg, d_k):
    logic_count = logic_cell_parameter_count(cfg, d_k)
    assert logic_count < convlstm_parameter_count(cfg, d_k)
    assert LogicCell(cfg, d_k, 8, rng).parameter_count() == logic_count
