"""Cohort-level helpers shared by the experiment scripts: phantom cohorts, training variants, scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from clotseg.config.settings import Settings
from clotseg.core.logger import get_logger
from clotseg.data.phantom import generate_cohort
from clotseg.data.standardize import LandmarkModel, standardize
from clotseg.layers.upattllstm import UpAttLLSTM
from clotseg.models.schemas import Volume
from clotseg.services.inference import predict_volume
from clotseg.services.metrics import cohort_frame, score_patient
from clotseg.services.moddrop import mask_missing
from clotseg.services.postprocess import PostProcessor, binarize
from clotseg.services.trainer import Trainer, training_rng

logger = get_logger(__name__)


@dataclass
class Cohort:
    train: List[Volume]
    test: List[Volume]
    landmarks: LandmarkModel


def make_cohort(settings: Settings, n_train: int, n_test: int, seed: int, test_distractors: Optional[int] = None) -> Cohort:
    """Standardized train/test phantoms; test volumes use indices after the training ones."""
    train = generate_cohort(settings.synth, n_train, seed)
    test_spec = settings.synth
    if test_distractors is not None:
        test_spec = settings.synth.model_copy(update={"distractor_count": test_distractors})
    test = generate_cohort(test_spec, n_test, seed, start=n_train)
    landmarks = LandmarkModel.fit(train)
    return Cohort(
        train=[standardize(vol, landmarks) for vol in train],
        test=[standardize(vol, landmarks) for vol in test],
        landmarks=landmarks,
    )


def fit_model(settings: Settings, volumes: Sequence[Volume], progress: bool = False) -> Trainer:
    model = UpAttLLSTM.from_settings(settings)
    trainer = Trainer(model, settings, training_rng(settings.resolved_seed), progress=progress)
    trainer.fit(volumes, settings.train.epochs)
    return trainer


def predict_cohort(model: UpAttLLSTM, volumes: Sequence[Volume], missing: Iterable[str] = ()) -> List[np.ndarray]:
    missing = tuple(missing)
    return [predict_volume(model, mask_missing(vol, missing)) for vol in volumes]


def score_predictions(
    probs: Sequence[np.ndarray],
    volumes: Sequence[Volume],
    postprocessor: Optional[PostProcessor] = None,
    *,
    base_threshold: float = 0.5,
    connectivity: int = 26,
    prefix: str = "case",
) -> pd.DataFrame:
    """Score raw thresholding (no postprocessor) or the refined masks against each volume's thrombus.

    The refinement reads each volume's `lesion` mask as a scan-side input, the same way `infer` does.
    """
    scores = []
    for index, (prob, vol) in enumerate(zip(probs, volumes)):
        if postprocessor is None:
            pred = binarize(prob, base_threshold)
        else:
            pred = postprocessor.refine(prob, vol.gt_lesion, vol.spacing)
        scores.append(score_patient(f"{prefix}-{index:03d}", pred, vol.gt_thrombus, connectivity))
    return cohort_frame(scores)


__all__ = ["Cohort", "fit_model", "make_cohort", "predict_cohort", "score_predictions"]
