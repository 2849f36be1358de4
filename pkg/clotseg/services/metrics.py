"""Per-patient segmentation scores and cohort aggregation."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
import pandas as pd

from clotseg.core.errors import DimensionError
from clotseg.models.schemas import PatientScore
from clotseg.services.postprocess import connected_components

REPORT_COLUMNS = ["patient_id", "dice", "fp_count", "fp_size", "fn_count", "fn_size", "detected"]
SUMMARY_ID = "mean"


def _pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def _unmatched(source: np.ndarray, other: np.ndarray, connectivity: int) -> Tuple[int, float]:
    sizes = [comp.voxel_count for comp in connected_components(source, connectivity).components if not other[tuple(comp.voxels.T)].any()]
    return len(sizes), float(np.mean(sizes)) if sizes else 0.0


def component_confusion(pred: np.ndarray, gt: np.ndarray, connectivity: int = 26) -> Tuple[int, float, int, float]:
    """(fp_count, fp_size, fn_count, fn_size) at the component level; sizes are mean voxel counts."""
    pred, gt = _pair(pred, gt)
    fp_count, fp_size = _unmatched(pred, gt, connectivity)
    fn_count, fn_size = _unmatched(gt, pred, connectivity)
    return fp_count, fp_size, fn_count, fn_size


def detection(pred: np.ndarray, gt: np.ndarray) -> Optional[int]:
    """1 if any predicted voxel touches the ground truth; None when there is nothing to detect."""
    pred, gt = _pair(pred, gt)
    if not gt.any():
        return None
    return int(np.logical_and(pred, gt).any())


def score_patient(patient_id: str, pred: np.ndarray, gt: np.ndarray, connectivity: int = 26) -> PatientScore:
    fp_count, fp_size, fn_count, fn_size = component_confusion(pred, gt, connectivity)
    return PatientScore(
        patient_id=patient_id,
        dice=dice(pred, gt),
        fp_count=fp_count,
        fp_size=fp_size,
        fn_count=fn_count,
        fn_size=fn_size,
        detected=detection(pred, gt),
    )


def cohort_frame(scores: Iterable[PatientScore]) -> pd.DataFrame:
    """One row per patient followed by a row of arithmetic means (detection ignores N/A rows)."""
    frame = pd.DataFrame([score.model_dump() for score in scores], columns=REPORT_COLUMNS)
    frame["detected"] = frame["detected"].astype("Float64")
    summary = {"patient_id": SUMMARY_ID}
    for column in REPORT_COLUMNS[1:]:
        values = frame[column].dropna()
        summary[column] = float(values.mean()) if len(values) else float("nan")
    return pd.concat([frame, pd.DataFrame([summary], columns=REPORT_COLUMNS)], ignore_index=True)


def summary_row(frame: pd.DataFrame) -> dict:
    row = frame[frame["patient_id"] == SUMMARY_ID].iloc[-1]
    return {column: (None if pd.isna(row[column]) else float(row[column])) for column in REPORT_COLUMNS[1:]}


def write_report(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="NA", float_format="%.6f")
    return path


__all__ = [
    "REPORT_COLUMNS",
    "cohort_frame",
    "component_confusion",
    "detection",
    "dice",
    "score_patient",
    "summary_row",
    "write_report",
]
