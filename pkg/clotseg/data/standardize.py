"""Decile-landmark intensity standardization over nonzero (brain) voxels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from clotseg.core.errors import DegenerateVolumeError
from clotseg.core.logger import get_logger
from clotseg.models.schemas import MODALITIES, Volume

logger = get_logger(__name__)

PERCENTILES = np.linspace(0.0, 100.0, 11)


def volume_landmarks(data: np.ndarray, label: str = "volume") -> np.ndarray:
    """Min, deciles 10..90 and max of the nonzero voxels; must be strictly increasing."""
    foreground = data[data != 0]
    if foreground.size == 0:
        raise DegenerateVolumeError(f"{label} has no nonzero voxels to standardize")
    marks = np.percentile(foreground.astype(np.float64), PERCENTILES)
    if np.any(np.diff(marks) <= 0):
        raise DegenerateVolumeError(f"{label} landmarks are not strictly increasing: {np.round(marks, 6).tolist()}")
    return marks


def fit_landmarks(volumes: Iterable[Volume], modality: str) -> np.ndarray:
    """Reference landmarks for one modality: the per-volume landmarks, averaged."""
    stacked = [
        volume_landmarks(vol.modalities[modality], f"{modality} channel")
        for vol in volumes
        if vol.presence.get(modality, True) and np.any(vol.modalities[modality])
    ]
    if not stacked:
        raise DegenerateVolumeError(f"No training volume carries a usable {modality} channel")
    return np.mean(stacked, axis=0)


@dataclass
class LandmarkModel:
    references: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, marks in self.references.items():
            marks = np.asarray(marks, dtype=np.float64)
            if marks.shape != PERCENTILES.shape or np.any(np.diff(marks) <= 0):
                raise DegenerateVolumeError(f"Reference landmarks for {name} must be 11 strictly increasing values")
            self.references[name] = marks

    @classmethod
    def fit(cls, volumes: Sequence[Volume], modalities: Sequence[str] = MODALITIES) -> "LandmarkModel":
        if not volumes:
            raise DegenerateVolumeError("Landmark fitting needs at least one training volume")
        model = cls({name: fit_landmarks(volumes, name) for name in modalities})
        logger.info("Fitted landmarks for %s on %d volumes", list(modalities), len(volumes))
        return model


def standardize_channel(data: np.ndarray, reference: np.ndarray, label: str = "volume") -> np.ndarray:
    own = volume_landmarks(data, label)
    out = np.zeros_like(data, dtype=np.float32)
    mask = data != 0
    out[mask] = np.interp(data[mask].astype(np.float64), own, reference)
    return out


def standardize(vol: Volume, model: LandmarkModel, modalities: Optional[Sequence[str]] = None) -> Volume:
    """Map each present channel's landmarks onto the reference, piecewise-linearly, clamping outside."""
    names = modalities or [name for name in vol.names if name in model.references]
    updated = dict(vol.modalities)
    for name in names:
        if not vol.presence.get(name, True) or not np.any(vol.modalities[name]):
            continue
        updated[name] = standardize_channel(vol.modalities[name], model.references[name], f"{name} channel")
    return vol.copy(modalities=updated)


__all__ = ["LandmarkModel", "PERCENTILES", "fit_landmarks", "standardize", "standardize_channel", "volume_landmarks"]
