import math

import numpy as np
import pytest

from clotseg.config.settings import load_settings
from clotseg.core.errors import ConfigError, DimensionError
from clotseg.layers.upattllstm import UpAttLLSTM, cross_entropy, loss, soft_dice
from clotseg.models.schemas import Crop, RetentionSample
from clotseg.services.moddrop import mask_crop
from clotseg.tensor.gradcheck import grad_check
from clotseg.tensor.tensor import Tensor

PAPER_PARAMETER_CEILING = 5_000_000


def _crop(rng: np.random.Generator, n1: int = 16, s: int = 3) -> Crop:
    planes = rng.normal(size=(3, n1, n1, s)).astype(np.float32)
    gt = np.zeros((n1, n1, s), dtype=bool)
    gt[6:9, 6:9, 1] = True
    return Crop(dwi=planes[0], swan=planes[1], phase=planes[2], gt=gt, contains_target=True)


def test_forward_shape_and_range(desk_model, rng):
    prob = desk_model(_crop(rng))
    assert prob.shape == (16, 16, 3)
    assert prob.data.min() >= 0.0 and prob.data.max() <= 1.0


def test_keep_all_retention_is_bit_exact(desk_model, rng):
    crop = _crop(rng)
    plain = desk_model(crop).data
    kept = desk_model(crop, RetentionSample.keep_all()).data
    assert plain.tobytes() == kept.tobytes()


def test_zero_phase_coefficient_matches_missing_phase(desk_model, rng):
    crop = _crop(rng)
    dropped = RetentionSample(r=np.array([1, 1, 0], dtype=np.int8), r_tilde=np.array([1.0, 1.0, 0.0]))
    np.testing.assert_allclose(desk_model(crop, dropped).data, desk_model(mask_crop(crop, ["PHASE"])).data)


def test_forward_is_deterministic(desk_model, rng):
    crop = _crop(rng)
    assert desk_model(crop).data.tobytes() == desk_model(crop).data.tobytes()


def test_wrong_crop_side_is_rejected(desk_model, rng):
    with pytest.raises(ConfigError):
        desk_model(_crop(rng, n1=8))


def test_uniform_half_on_empty_ground_truth_costs_ln2():
    prob = Tensor(np.full((2, 2, 1), 0.5))
    gt = np.zeros((2, 2, 1))
    assert cross_entropy(prob, gt).item() == pytest.approx(math.log(2.0))
    assert loss(prob, gt, weights=(1.0, 0.0)).item() == pytest.approx(math.log(2.0))
    assert soft_dice(prob, gt).item() == pytest.approx(1.0 / 3.0)


def test_perfect_prediction_has_zero_loss():
    gt = np.zeros((3, 3, 2))
    gt[1, 1, :] = 1.0
    assert loss(Tensor(gt.copy()), gt).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        loss(Tensor(np.full((2, 2, 1), 0.5)), np.zeros((2, 2, 2)))


def test_model_loss_gradients(desk_model, rng):
    crop = _crop(rng, s=2)
    assert grad_check(lambda: loss(desk_model(crop), crop.gt), desk_model.parameters(), coords_per_param=2) < 1e-4


def test_published_configuration_stays_small(empty_config):
    model = UpAttLLSTM.from_settings(load_settings(empty_config), seed=0)
    assert model.parameter_count() < PAPER_PARAMETER_CEILING
    assert model.cell_parameter_count() == model.lstm.cell.parameter_count()
