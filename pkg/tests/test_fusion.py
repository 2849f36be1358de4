import numpy as np
import pytest

from clotseg.config.settings import FusionConfig
from clotseg.core.errors import CheckpointMismatchError, DimensionError
from clotseg.layers.base import MLP, Conv2d, Linear, Module
from clotseg.layers.fusion import (
    DETAIL_CHANNELS,
    CrossAttention,
    DetailMerge,
    FusionBlock,
    ResidualGates,
    TokenGrid,
    attention_residuals,
    patch_embed,
    scaled_dot_attention,
    upsample_block,
)
from clotseg.tensor.gradcheck import grad_check
from clotseg.tensor.tensor import Tensor

DESK = FusionConfig(n1=16, p1=8, p2=2, d_k=4, mlp_hidden=4)


class _Pair(Module):
    def __init__(self, rng):
        super().__init__()
        self.first = Linear(3, 2, rng)
        self.second = MLP(2, 4, rng)


def test_module_registers_nested_parameters_with_dotted_names(rng):
    names = [name for name, _ in _Pair(rng).named_parameters()]
    assert names == ["first.weight", "first.bias", "second.fc1.weight", "second.fc1.bias", "second.fc2.weight", "second.fc2.bias"]


def test_load_state_refuses_shape_mismatch_with_diff(rng):
    model = _Pair(rng)
    state = model.state()
    state["first.weight"] = np.zeros((4, 2))
    del state["second.fc2.bias"]
    with pytest.raises(CheckpointMismatchError) as info:
        model.load_state(state)
    assert set(info.value.diff) == {"first.weight", "second.fc2.bias"}


def test_patch_embed_sums_each_patch():
    projection = Conv2d(1, 1, 4, np.random.default_rng(0), padding="valid", stride=4)
    projection.kernel.data[:] = 1.0
    img = Tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 4))
    grid = patch_embed(img, projection, Tensor(np.array([[9.0]])), None)
    assert grid.grid_side == 1
    np.testing.assert_array_equal(grid.tokens.data, [[9.0], [120.0]])


def test_patch_embed_token_count_and_zero_image(rng):
    projection = Conv2d(2, 3, 4, rng, padding="valid", stride=4)
    projection.bias.data[:] = [1.0, 2.0, 3.0]
    grid = patch_embed(Tensor(np.zeros((2, 16, 16))), projection, Tensor(np.zeros((1, 3))), Tensor(np.zeros((17, 3))))
    assert grid.tokens.shape == (17, 3)
    np.testing.assert_array_equal(grid.body().data, np.tile([1.0, 2.0, 3.0], (16, 1)))
    with pytest.raises(DimensionError):
        patch_embed(Tensor(np.zeros((2, 10, 10))), projection, None, None)


def test_attention_singleton_returns_value():
    out = scaled_dot_attention(Tensor(np.array([[3.0, -1.0]])), Tensor(np.array([[0.5, 2.0]])), Tensor(np.array([[7.0, 8.0]])))
    np.testing.assert_allclose(out.data, [[7.0, 8.0]])


def test_attention_identical_keys_average_values(rng):
    keys = Tensor(np.tile(rng.normal(size=(1, 3)), (4, 1)))
    values = Tensor(rng.normal(size=(4, 2)))
    out = scaled_dot_attention(Tensor(rng.normal(size=(5, 3))), keys, values)
    np.testing.assert_allclose(out.data, np.tile(values.data.mean(axis=0), (5, 1)), atol=1e-12)


def test_attention_two_token_hand_case():
    out = scaled_dot_attention(
        Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), Tensor(np.array([[2.0], [4.0]])), d_k=1
    )
    weight = 1.0 / (1.0 + np.exp(-1.0))
    assert out.data[0, 0] == pytest.approx(2 * weight + 4 * (1 - weight))
    assert out.data[0, 0] == pytest.approx(2.538, abs=1e-3)


def test_attention_two_token_gradient(rng):
    q, k, v = (Tensor(rng.normal(size=(2, 3)), requires_grad=True) for _ in range(3))
    assert grad_check(lambda: scaled_dot_attention(q, k, v).sum(), [q, k, v]) < 1e-4


def test_residual_gates_closed_give_normalized_tokens(rng):
    gates = ResidualGates(4, 4, rng)
    gates.lambda1.data = np.zeros(())
    gates.lambda2.data = np.zeros(())
    tokens = rng.normal(size=(17, 4))
    z12 = TokenGrid(Tensor(tokens), 4)
    z2 = TokenGrid(Tensor(rng.normal(size=(17, 4))), 4)
    out = attention_residuals(z12, z2, gates).data
    body = tokens[1:]
    expected = (body - body.mean(axis=1, keepdims=True)) / np.sqrt(body.var(axis=1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, expected.reshape(4, 4, 4), atol=1e-10)

    tokens[0] += 100.0
    again = attention_residuals(TokenGrid(Tensor(tokens), 4), z2, gates).data
    np.testing.assert_array_equal(again, out)


def test_cross_attention_rejects_mismatched_grids(rng):
    attn = CrossAttention(4, 4, rng)
    with pytest.raises(DimensionError):
        attn(TokenGrid(Tensor(np.zeros((10, 4))), 3), TokenGrid(Tensor(np.zeros((17, 4))), 4))


def test_upsample_block_shapes_and_zero_input(rng):
    block = DetailMerge(2, 4, rng)
    assert block.merge.kernel.shape[1] == DETAIL_CHANNELS + 4
    out = upsample_block(Tensor(rng.normal(size=(8, 8, 4))), Tensor(np.zeros((2, 16, 16))), block, 2)
    assert out.shape == (16, 16, 4)


@pytest.mark.parametrize(
    "cfg",
    [DESK, FusionConfig(n1=8, p1=4, p2=4, d_k=2, mlp_hidden=3), FusionConfig(n1=24, p1=12, p2=3, d_k=3, mlp_hidden=2)],
)
@pytest.mark.parametrize("upsample", [True, False])
def test_fusion_block_shape_law(rng, cfg, upsample):
    block = FusionBlock(cfg, rng, upsample=upsample)
    out = block(Tensor(rng.normal(size=(1, cfg.n1, cfg.n1))), Tensor(rng.normal(size=(2, cfg.n1, cfg.n1))))
    assert out.shape == (cfg.d_k, cfg.n1, cfg.n1)


def test_fusion_block_is_slice_independent(rng):
    block = FusionBlock(DESK, rng)
    planes = [(rng.normal(size=(1, 16, 16)), rng.normal(size=(2, 16, 16))) for _ in range(2)]
    forward = [block(Tensor(d), Tensor(sp)).data for d, sp in planes]
    backward = [block(Tensor(d), Tensor(sp)).data for d, sp in reversed(planes)]
    np.testing.assert_array_equal(forward[0], backward[1])


def test_fusion_block_gradients(rng):
    block = FusionBlock(DESK, rng)
    dwi, swan_phase = Tensor(rng.normal(size=(1, 16, 16))), Tensor(rng.normal(size=(2, 16, 16)))
    weights = Tensor(rng.normal(size=(4, 16, 16)))
    params = block.parameters()
    assert grad_check(lambda: (block(dwi, swan_phase) * weights).sum(), params, coords_per_param=3) < 1e-4
