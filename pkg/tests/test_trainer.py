import numpy as np
import pandas as pd
import pytest

from clotseg.config.settings import with_overrides
from clotseg.core.errors import CheckpointFormatError, CheckpointMismatchError, TrainingDivergedError
from clotseg.data.phantom import generate_cohort
from clotseg.layers.upattllstm import UpAttLLSTM
from clotseg.services.checkpoint import (
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from clotseg.services.trainer import (
    LOG_COLUMNS,
    AdamState,
    Trainer,
    adam_step,
    balanced_crops,
    clip_gradients,
    model_from_checkpoint,
    resume_transfer,
    train,
    training_rng,
)


@pytest.fixture
def volumes(tiny_settings):
    return generate_cohort(tiny_settings.synth, 2, seed=3)


def _params_equal(left, right) -> bool:
    return left.keys() == right.keys() and all(np.array_equal(left[k], right[k]) for k in left)


# -- optimizer ------------------------------------------------------------------------------------


def test_adam_with_zero_gradient_keeps_parameters():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState()
    updated = adam_step(params, {"w": np.zeros(3)}, state, lr=0.01)
    np.testing.assert_array_equal(updated["w"], params["w"])
    assert state.t == 1


def test_first_adam_step_moves_by_lr_against_the_gradient_sign():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    updated = adam_step(params, {"w": np.array([0.5, -4.0, 1e-3])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(updated["w"] - params["w"], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_moments_decay_without_gradient():
    state = AdamState()
    params = {"w": np.array([0.0, 0.0])}
    params = adam_step(params, {"w": np.array([1.0, -1.0])}, state, lr=0.1)
    first = state.m["w"].copy()
    adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(state.m["w"], state.beta1 * first)
    assert state.t == 2


def test_adam_refuses_non_finite_and_misshaped_gradients():
    params = {"w": np.zeros(2)}
    with pytest.raises(TrainingDivergedError):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, AdamState(), lr=0.1)
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(3)}, AdamState(), lr=0.1)


def test_clip_gradients_scales_globally():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8])
    assert clip_gradients(grads, 10.0)[0] is grads
    assert clip_gradients(grads, None)[0] is grads


# -- checkpoints ----------------------------------------------------------------------------------


def _checkpoint(settings) -> Checkpoint:
    model = UpAttLLSTM.from_settings(settings)
    return Checkpoint.capture(
        model.state(),
        settings,
        epoch=3,
        adam_t=7,
        moment1={"fusion.cls_token": np.ones((1, 4))},
        landmarks={"DWI": np.linspace(0.0, 1.0, 11)},
        rng=np.random.default_rng(5),
        adam_hyper=AdamState().hyper(),
    )


def test_checkpoint_bytes_are_stable_across_save_and_load(tiny_settings, tmp_path):
    ckpt = _checkpoint(tiny_settings)
    first = save_checkpoint(ckpt, tmp_path / "a.csck")
    second = save_checkpoint(load_checkpoint(first), tmp_path / "b.csck")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes()[:4] == b"CSCK"


def test_checkpoint_restores_state(tiny_settings):
    ckpt = _checkpoint(tiny_settings)
    loaded = decode_checkpoint(encode_checkpoint(ckpt))
    assert (loaded.epoch, loaded.adam_t) == (3, 7)
    assert _params_equal(loaded.params, ckpt.params)
    assert loaded.settings() == tiny_settings
    assert loaded.meta["seed"] == "3"
    assert loaded.meta["adam_beta1"] == "0.9"
    np.testing.assert_array_equal(loaded.landmarks["DWI"], np.linspace(0.0, 1.0, 11))
    expected = np.random.default_rng(5).random(3)
    np.testing.assert_array_equal(loaded.restore_rng().random(3), expected)
    model = model_from_checkpoint(loaded)
    assert _params_equal(model.state(), ckpt.params)


def test_checkpoint_for_another_architecture_is_refused(tiny_settings):
    ckpt = _checkpoint(tiny_settings)
    wider = with_overrides(tiny_settings, ["fusion.d_k=8"])
    with pytest.raises(CheckpointMismatchError):
        model_from_checkpoint(ckpt, wider)


def test_corrupted_checkpoints_are_refused(tiny_settings, tmp_path):
    payload = encode_checkpoint(_checkpoint(tiny_settings))
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(b"XXXX" + payload[4:])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(payload[:-3])
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.csck")


# -- training loop --------------------------------------------------------------------------------


def test_balanced_crops_count(tiny_settings, volumes):
    crops = balanced_crops(volumes, 16, 4, 3, np.random.default_rng(0))
    assert len(crops) == 6
    assert all(crop.dwi.shape == (16, 16, 4) for crop in crops)


def test_training_is_deterministic_for_a_seed(tiny_settings, volumes):
    first = Trainer(UpAttLLSTM.from_settings(tiny_settings), tiny_settings, progress=False)
    second = Trainer(UpAttLLSTM.from_settings(tiny_settings), tiny_settings, progress=False)
    first.fit(volumes, 1)
    second.fit(volumes, 1)
    assert [row["loss"] for row in first.history] == [row["loss"] for row in second.history]
    assert _params_equal(first.model.state(), second.model.state())
    assert all(np.isfinite(row["loss"]) for row in first.history)


def test_train_writes_checkpoints_and_log(tiny_settings, volumes):
    ckpt = train(
        UpAttLLSTM.from_settings(tiny_settings),
        volumes,
        tiny_settings,
        checkpoint_dir=tiny_settings.checkpoint_path,
        log_path=tiny_settings.train_log_path,
        progress=False,
    )
    assert ckpt.epoch == 2
    assert ckpt.adam_t == 4
    for name in ("epoch-00001.csck", "epoch-00002.csck", "latest.csck"):
        assert (tiny_settings.checkpoint_path / name).exists()
    log = pd.read_csv(tiny_settings.train_log_path)
    assert list(log.columns) == LOG_COLUMNS
    assert list(log["g_value"]) == [0.75, 0.75, 0.25, 0.25]


def test_resume_without_extra_epochs_changes_nothing(tiny_settings, volumes):
    trainer = Trainer(UpAttLLSTM.from_settings(tiny_settings), tiny_settings, progress=False)
    ckpt = trainer.fit(volumes, 1)
    resumed = resume_transfer(ckpt, with_overrides(tiny_settings, ["train.extra_epochs_on_resume=0"]), volumes, progress=False)
    assert _params_equal(resumed.params, ckpt.params)
    assert resumed.epoch == ckpt.epoch
    assert resumed.adam_t == 0


def test_resume_restarts_the_dropout_schedule(tiny_settings, volumes):
    trainer = Trainer(UpAttLLSTM.from_settings(tiny_settings), tiny_settings, progress=False)
    ckpt = trainer.fit(volumes, 2)
    settings = with_overrides(tiny_settings, ["train.extra_epochs_on_resume=1"])
    log_path = tiny_settings.output_path / "resume_log.csv"
    resumed = resume_transfer(ckpt, settings, volumes, log_path=log_path, progress=False)
    log = pd.read_csv(log_path)
    assert list(log["epoch"].unique()) == [2]
    assert set(log["g_value"]) == {0.75}
    assert resumed.epoch == 3
    assert resumed.adam_t == len(log)


def test_resume_continues_the_stored_generator(tiny_settings, volumes):
    trainer = Trainer(UpAttLLSTM.from_settings(tiny_settings), tiny_settings, progress=False)
    ckpt = decode_checkpoint(encode_checkpoint(trainer.fit(volumes, 1)))
    settings = with_overrides(tiny_settings, ["train.extra_epochs_on_resume=1"])

    def resume(name, rng=None):
        log_path = tiny_settings.output_path / f"{name}.csv"
        resumed = resume_transfer(ckpt, settings, volumes, rng=rng, log_path=log_path, progress=False)
        return resumed, list(pd.read_csv(log_path)["loss"])

    first, first_losses = resume("first")
    second, second_losses = resume("second")
    explicit, explicit_losses = resume("explicit", ckpt.restore_rng())
    reseeded, reseeded_losses = resume("reseeded", training_rng(tiny_settings.resolved_seed))

    assert encode_checkpoint(first) == encode_checkpoint(second)
    assert first_losses == second_losses
    assert _params_equal(first.params, explicit.params)
    assert first_losses == explicit_losses
    assert first_losses != reseeded_losses
