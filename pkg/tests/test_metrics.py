import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from clotseg.core.errors import DimensionError
from clotseg.models.schemas import PatientScore
from clotseg.services.metrics import (
    REPORT_COLUMNS,
    cohort_frame,
    component_confusion,
    detection,
    dice,
    score_patient,
    summary_row,
    write_report,
)


def _blob(shape, x0, size):
    mask = np.zeros(shape, dtype=bool)
    mask[x0 : x0 + size, 0, 0] = True
    return mask


def test_dice_hand_cases():
    empty = np.zeros((4, 4, 2), dtype=bool)
    one = empty.copy()
    one[0, 0, 0] = True
    assert dice(empty, empty) == 1.0
    assert dice(empty, one) == 0.0
    assert dice(one, one) == 1.0
    pair = one.copy()
    pair[1, 0, 0] = True
    other = one.copy()
    other[3, 3, 1] = True
    assert dice(pair, other) == pytest.approx(0.5)
    with pytest.raises(DimensionError):
        dice(empty, np.zeros((4, 4, 3)))


def test_component_confusion_hand_cases():
    shape = (64, 2, 2)
    empty = np.zeros(shape, dtype=bool)
    assert component_confusion(_blob(shape, 0, 30), empty) == (1, 30.0, 0, 0.0)
    assert component_confusion(empty, _blob(shape, 0, 50)) == (0, 0.0, 1, 50.0)
    touching = component_confusion(_blob(shape, 0, 10), _blob(shape, 5, 10))
    assert touching == (0, 0.0, 0, 0.0)


def test_component_confusion_sizes_are_means():
    shape = (64, 2, 2)
    pred = _blob(shape, 0, 4) | _blob(shape, 10, 8) | _blob(shape, 40, 5)
    gt = _blob(shape, 40, 3) | _blob(shape, 50, 6)
    assert component_confusion(pred, gt) == (2, 6.0, 1, 6.0)


def test_component_confusion_matches_flood_fill(flood_fill):
    rng = np.random.default_rng(9)
    for _ in range(50):
        pred = rng.random((10, 10, 6)) < 0.08
        gt = rng.random((10, 10, 6)) < 0.08
        fp = [c for c in flood_fill(pred, 26) if not gt[tuple(np.array(c).T)].any()]
        fn = [c for c in flood_fill(gt, 26) if not pred[tuple(np.array(c).T)].any()]
        fp_count, fp_size, fn_count, fn_size = component_confusion(pred, gt)
        assert (fp_count, fn_count) == (len(fp), len(fn))
        assert fp_size == pytest.approx(np.mean([len(c) for c in fp]) if fp else 0.0)
        assert fn_size == pytest.approx(np.mean([len(c) for c in fn]) if fn else 0.0)


def test_detection():
    shape = (16, 2, 2)
    assert detection(_blob(shape, 0, 3), np.zeros(shape)) is None
    assert detection(_blob(shape, 0, 3), _blob(shape, 2, 3)) == 1
    assert detection(_blob(shape, 0, 3), _blob(shape, 8, 3)) == 0


def test_score_patient_and_cohort_frame(tmp_path):
    shape = (16, 2, 2)
    hit = score_patient("p1", _blob(shape, 0, 4), _blob(shape, 0, 4))
    miss = score_patient("p2", _blob(shape, 0, 4), _blob(shape, 8, 4))
    healthy = score_patient("p3", np.zeros(shape), np.zeros(shape))
    assert (hit.dice, hit.detected) == (1.0, 1)
    assert (miss.dice, miss.detected, miss.fp_count, miss.fn_count) == (0.0, 0, 1, 1)
    assert healthy.detected is None

    frame = cohort_frame([hit, miss, healthy])
    assert list(frame.columns) == REPORT_COLUMNS
    assert list(frame["patient_id"]) == ["p1", "p2", "p3", "mean"]
    summary = summary_row(frame)
    assert summary["dice"] == pytest.approx(2.0 / 3.0)
    assert summary["detected"] == pytest.approx(0.5)

    path = write_report(frame, tmp_path / "nested" / "scores.csv")
    loaded = pd.read_csv(path)
    assert list(loaded["patient_id"]) == ["p1", "p2", "p3", "mean"]
    assert pd.isna(loaded.loc[2, "detected"])


def test_patient_score_rejects_bad_values():
    with pytest.raises(ValidationError):
        PatientScore(patient_id="x", dice=0.5, fp_count=0, fp_size=0, fn_count=0, fn_size=0, detected=2)
    with pytest.raises(ValidationError):
        PatientScore(patient_id="x", dice=1.5, fp_count=0, fp_size=0, fn_count=0, fn_size=0)
