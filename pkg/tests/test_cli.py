import numpy as np
import pandas as pd
import pytest

from clotseg.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from clotseg.data.mvol import read_mvol, write_mvol
from clotseg.layers.upattllstm import UpAttLLSTM
from clotseg.models.schemas import LESION, PROB_CHANNEL, THROMBUS, Volume
from clotseg.services.checkpoint import Checkpoint, save_checkpoint

SMALL_SYNTH = [
    "synth.shape=[24, 24, 12]",
    "synth.brain_radii=[10.0, 10.0, 5.0]",
    "synth.lesion_radius=[2, 3]",
    "synth.thrombus_radius=[1, 1]",
    "synth.max_distance=2.0",
]
TINY_MODEL = [
    "fusion.n1=16",
    "fusion.p1=8",
    "fusion.p2=2",
    "fusion.d_k=4",
    "fusion.mlp_hidden=4",
    "llstm.n_c=2",
    "llstm.n_l=2",
    "llstm.m=1",
    "model.s=4",
]


def _sets(values):
    argv = []
    for value in values:
        argv += ["--set", value]
    return argv


def _synth(empty_config, out, seed=5, count=2):
    return main(["synth", "--config", str(empty_config), "--count", str(count), "--seed", str(seed), "--out", str(out), *_sets(SMALL_SYNTH)])


def test_synth_is_deterministic_and_prints_the_run_header(empty_config, tmp_path, capsys):
    assert _synth(empty_config, tmp_path / "a") == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("# seed=5\n")
    assert "# synth.shape=" in out
    assert _synth(empty_config, tmp_path / "b") == EXIT_OK
    for name in ("phantom-0000.mvol", "phantom-0001.mvol"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert read_mvol(tmp_path / "a" / "phantom-0000.mvol").shape == (24, 24, 12)


def test_synth_spec_file_overrides_the_section(empty_config, tmp_path):
    spec = tmp_path / "spec.yaml"
    spec.write_text("synth:\n  shape: [20, 20, 10]\n  brain_radii: [8.0, 8.0, 4.0]\n", encoding="utf-8")
    code = main(["synth", "--config", str(empty_config), "--out", str(tmp_path / "out"), "--spec", str(spec), *_sets(SMALL_SYNTH)])
    assert code == EXIT_OK
    assert read_mvol(tmp_path / "out" / "phantom-0000.mvol").shape == (20, 20, 10)


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["explode"],
        ["synth", "--count", "two"],
        ["synth", "--log-level", "LOUD"],
        ["synth", "--set", "not-an-override"],
        ["synth", "--set", "llstm.n_l=8"],
        ["synth", "--config", "/nonexistent/config.yaml"],
        ["eval", "--pred", "/nonexistent/pred", "--gt", "/nonexistent/gt"],
        ["infer", "--checkpoint", "x.csck", "--input", "x.mvol", "--out", "o", "--missing", "T2"],
    ],
)
def test_invalid_invocations_exit_with_one(argv, empty_config):
    if argv and argv[0] in ("synth", "eval", "infer") and "--config" not in argv:
        argv = [*argv, "--config", str(empty_config)]
    assert main(argv) == EXIT_INVALID


def test_version_exits_cleanly(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "clotseg" in capsys.readouterr().out


def test_eval_scores_matching_files(empty_config, tmp_path, capsys):
    _synth(empty_config, tmp_path / "gt")
    pred_dir = tmp_path / "pred"
    for path in sorted((tmp_path / "gt").glob("*.mvol")):
        gt = read_mvol(path)
        write_mvol(Volume(modalities={PROB_CHANNEL: gt.masks[THROMBUS].astype(np.float32)}, masks={THROMBUS: gt.masks[THROMBUS]}), pred_dir / path.name)
    report = tmp_path / "scores.csv"
    code = main(["eval", "--config", str(empty_config), "--pred", str(pred_dir), "--gt", str(tmp_path / "gt"), "--out", str(report)])
    assert code == EXIT_OK
    frame = pd.read_csv(report)
    assert list(frame["patient_id"]) == ["phantom-0000", "phantom-0001", "mean"]
    assert frame["dice"].tolist() == [1.0, 1.0, 1.0]
    capsys.readouterr()
    assert main(["eval", "--config", str(empty_config), "--pred", str(pred_dir), "--gt", str(tmp_path / "gt")]) == EXIT_OK
    assert "patient_id,dice" in capsys.readouterr().out


def test_corrupted_volume_is_a_runtime_failure(empty_config, tmp_path):
    for folder in ("gt", "pred"):
        (tmp_path / folder).mkdir()
        (tmp_path / folder / "case.mvol").write_bytes(b"MVOL\x00\x00")
    code = main(["eval", "--config", str(empty_config), "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt")])
    assert code == EXIT_RUNTIME


def test_postprocess_writes_a_refined_mask(empty_config, tmp_path):
    prob = np.zeros((16, 16, 6), dtype=np.float32)
    prob[4:8, 4:8, 1:4] = 0.9
    prob[12, 12, 5] = 0.9
    lesion = np.zeros(prob.shape, dtype=bool)
    lesion[3:9, 3:9, 1:4] = True
    source = write_mvol(Volume(modalities={PROB_CHANNEL: prob}, masks={LESION: lesion}), tmp_path / "prob.mvol")
    out = tmp_path / "refined.mvol"
    code = main(["postprocess", "--config", str(empty_config), "--prob", str(source), "--npixels", "3", "--ndist", "5", "--out", str(out)])
    assert code == EXIT_OK
    mask = read_mvol(out).masks[THROMBUS]
    expected = np.zeros(prob.shape, dtype=bool)
    expected[4:8, 4:8, 1:4] = True
    np.testing.assert_array_equal(mask, expected)


def test_infer_writes_probability_and_mask(empty_config, tmp_path, tiny_settings):
    _synth(empty_config, tmp_path / "vols", count=1)
    model = UpAttLLSTM.from_settings(tiny_settings)
    ckpt_path = save_checkpoint(Checkpoint.capture(model.state(), tiny_settings, epoch=0), tmp_path / "model.csck")
    out_dir = tmp_path / "pred"
    code = main(["infer", "--config", str(empty_config), "--checkpoint", str(ckpt_path), "--input", str(tmp_path / "vols"), "--out", str(out_dir), "--missing", "PHASE"])
    assert code == EXIT_OK
    result = read_mvol(out_dir / "phantom-0000.mvol")
    assert result.names == (PROB_CHANNEL,)
    assert set(result.masks) == {THROMBUS, LESION}
    assert 0.0 <= result.modalities[PROB_CHANNEL].min() and result.modalities[PROB_CHANNEL].max() <= 1.0


def test_gradcheck_subset(empty_config, capsys):
    assert main(["gradcheck", "--config", str(empty_config), "--names", "square_sum", "matmul"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "square_sum" in out and "matmul" in out
    assert main(["gradcheck", "--config", str(empty_config), "--names", "no_such_check"]) == EXIT_INVALID


def test_train_and_resume(empty_config, tmp_path):
    _synth(empty_config, tmp_path / "vols")
    ckpt_dir = tmp_path / "ckpt"
    base = [
        "--config", str(empty_config),
        "--data", str(tmp_path / "vols"),
        "--seed", "3",
        "--quiet",
        *_sets([*SMALL_SYNTH, *TINY_MODEL, "train.crops_per_image=2", f"train.checkpoint_dir={ckpt_dir}", f"train.log_path={tmp_path / 'log.csv'}"]),
    ]
    assert main(["train", "--epochs", "1", *base]) == EXIT_OK
    latest = ckpt_dir / "latest.csck"
    assert latest.exists()
    assert main(["train", "--resume", str(latest), *base, "--set", "train.extra_epochs_on_resume=1"]) == EXIT_OK
    assert (ckpt_dir / "epoch-00002.csck").exists()
