import json

import numpy as np
import pandas as pd
import pytest

from clotseg.config.settings import PostprocessConfig, with_overrides
from clotseg.data.mvol import encode_volume
from clotseg.data.phantom import generate_phantom, phantom_rng
from clotseg.data.standardize import standardize
from clotseg.services.experiments import fit_model, make_cohort, predict_cohort, score_predictions
from clotseg.services.postprocess import PostProcessor
from clotseg.services.reports import save_report
from scripts.overfit import DEFAULT_CONFIG, run_overfit
from scripts.postprocess_experiment import STAGES, run_postprocess_experiment, stage_config
from scripts.robustness import _variants, plot_curve, robustness_verdict, run_robustness


def test_cohort_test_volumes_follow_the_training_indices(tiny_settings):
    cohort = make_cohort(tiny_settings, 2, 1, seed=4)
    assert (len(cohort.train), len(cohort.test)) == (2, 1)
    expected = standardize(generate_phantom(tiny_settings.synth, phantom_rng(4, 2)), cohort.landmarks)
    assert encode_volume(cohort.test[0]) == encode_volume(expected)
    assert set(cohort.landmarks.references) == {"DWI", "SWAN", "PHASE"}


def test_fit_predict_and_score_a_small_cohort(tiny_settings):
    settings = with_overrides(tiny_settings, ["train.epochs=1"])
    cohort = make_cohort(settings, 2, 2, seed=4)
    trainer = fit_model(settings, cohort.train)
    probs = predict_cohort(trainer.model, cohort.test, missing=["PHASE"])
    assert all(prob.shape == vol.shape for prob, vol in zip(probs, cohort.test))
    raw = score_predictions(probs, cohort.test, prefix="test")
    refined = score_predictions(probs, cohort.test, PostProcessor(settings.postprocess, settings.model.threshold))
    assert list(raw["patient_id"]) == ["test-000", "test-001", "mean"]
    assert len(refined) == 3


def test_robustness_variants():
    variants = _variants([0.2, 0.5], classic=True)
    assert [v["variant"] for v in variants] == ["baseline", "gradual", "classic", "gradual", "classic"]
    assert variants[0]["overrides"] == ["moddrop.enabled=false"]
    assert "moddrop.gradual=false" in variants[2]["overrides"]


def _robustness_frame():
    rows = []
    for seed, (base_full, base_missing, ref_full, ref_missing) in enumerate(
        [(0.8, 0.5, 0.78, 0.7), (0.8, 0.75, 0.8, 0.76), (0.7, 0.4, 0.75, 0.6)]
    ):
        rows.append({"seed": seed, "s": 4, "variant": "baseline", "keep_prob": 1.0, "dice_full": base_full, "dice_missing": base_missing})
        rows.append({"seed": seed, "s": 4, "variant": "gradual", "keep_prob": 0.5, "dice_full": ref_full, "dice_missing": ref_missing})
    return pd.DataFrame(rows)


def test_robustness_verdict_needs_a_majority():
    verdict = robustness_verdict(_robustness_frame())
    assert [run["passed"] for run in verdict["runs"]] == [True, False, True]
    assert not verdict["runs"][1]["baseline_drops"]
    assert verdict["majority_passed"]
    failing = _robustness_frame()
    failing.loc[failing["seed"] == 2, "dice_missing"] = 0.4
    assert not robustness_verdict(failing)["majority_passed"]


def test_plot_curve_writes_a_png(tmp_path):
    path = plot_curve(_robustness_frame(), tmp_path / "plots" / "curve.png")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_stages_enable_steps_cumulatively():
    base = PostprocessConfig()
    configs = [stage_config(base, enabled) for _, enabled in STAGES]
    assert [c.use_small for c in configs] == [True, True, True, True]
    assert [c.use_lesion for c in configs] == [False, True, True, True]
    assert [c.use_big for c in configs] == [False, False, True, True]
    assert [c.use_growth for c in configs] == [False, False, False, True]
    assert configs[0].n_pixels == base.n_pixels


def test_save_report_writes_latest_csv_and_history(tmp_path):
    frame = pd.DataFrame([{"patient_id": "a", "dice": 0.5, "detected": np.nan}])
    document = save_report("demo", {"seed": np.int64(3)}, frame, report_dir=tmp_path, history_dir=tmp_path / "history", tag="t")
    latest = json.loads((tmp_path / "demo-latest.json").read_text(encoding="utf-8"))
    assert latest["seed"] == 3 and latest["tag"] == "t" and latest["records"][0]["dice"] == 0.5
    assert latest["created_at"].endswith("Z")
    assert pd.read_csv(tmp_path / "demo-latest.csv")["patient_id"].tolist() == ["a"]
    assert len(list((tmp_path / "history").glob("*-demo.json"))) == 1
    assert document["name"] == "demo"


@pytest.mark.slow
def test_desk_model_overfits_a_few_phantoms(tmp_path):
    payload = run_overfit(DEFAULT_CONFIG, ["seed=0"], report_dir=tmp_path, progress=False)
    assert payload["reached_target"], payload["metrics"]


@pytest.mark.slow
def test_gradual_dropout_recovers_missing_phase(tmp_path):
    payload = run_robustness(DEFAULT_CONFIG, [], report_dir=tmp_path)
    assert payload["verdict"]["majority_passed"], payload["verdict"]


@pytest.mark.slow
def test_postprocessing_removes_false_positives(tmp_path):
    payload = run_postprocess_experiment(DEFAULT_CONFIG, ["seed=0"], report_dir=tmp_path)
    assert all(payload["verdict"].values()), payload["verdict"]
