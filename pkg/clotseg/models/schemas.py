from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

MODALITIES: Tuple[str, ...] = ("DWI", "SWAN", "PHASE")
THROMBUS = "thrombus"
LESION = "lesion"
PROB_CHANNEL = "PROB"


@dataclass
class Volume:
    """Multimodal 3D image in (X, Y, Z) layout with presence flags and ground-truth masks."""

    modalities: Dict[str, np.ndarray]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    presence: Dict[str, bool] = field(default_factory=dict)
    masks: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.modalities:
            raise ValueError("A volume needs at least one modality channel")
        shapes = {name: arr.shape for name, arr in {**self.modalities, **self.masks}.items()}
        if len(set(shapes.values())) != 1:
            raise ValueError(f"All channels and masks must share one shape, got {shapes}")
        if len(self.shape) != 3:
            raise ValueError(f"Volumes are 3D, got shape {self.shape}")
        self.modalities = {name: np.asarray(arr, dtype=np.float32) for name, arr in self.modalities.items()}
        self.masks = {name: np.asarray(arr, dtype=bool) for name, arr in self.masks.items()}
        self.presence = dict(self.presence)
        for name in self.modalities:
            self.presence.setdefault(name, True)
        for name, present in self.presence.items():
            if not present and np.any(self.modalities[name]):
                raise ValueError(f"Modality {name} is flagged absent but holds non-zero voxels")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return next(iter(self.modalities.values())).shape  # type: ignore[return-value]

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.modalities)

    @property
    def gt_thrombus(self) -> Optional[np.ndarray]:
        return self.masks.get(THROMBUS)

    @property
    def gt_lesion(self) -> Optional[np.ndarray]:
        return self.masks.get(LESION)

    def stack(self, names: Iterable[str] = MODALITIES) -> np.ndarray:
        return np.stack([self.modalities[name] for name in names], axis=0)

    def foreground(self) -> np.ndarray:
        return np.any(self.stack(self.names) != 0, axis=0)

    def copy(self, **changes) -> "Volume":
        base = replace(
            self,
            modalities={k: v.copy() for k, v in self.modalities.items()},
            presence=dict(self.presence),
            masks={k: v.copy() for k, v in self.masks.items()},
        )
        return replace(base, **changes) if changes else base


@dataclass
class Crop:
    """An (n1, n1, s) window of the three model modalities with its thrombus mask."""

    dwi: np.ndarray
    swan: np.ndarray
    phase: np.ndarray
    gt: np.ndarray
    contains_target: bool
    lesion: Optional[np.ndarray] = None
    origin: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self) -> None:
        shapes = {self.dwi.shape, self.swan.shape, self.phase.shape, self.gt.shape}
        if self.lesion is not None:
            shapes.add(self.lesion.shape)
        if len(shapes) != 1:
            raise ValueError(f"Crop planes disagree in shape: {sorted(shapes)}")
        if self.dwi.ndim != 3 or self.dwi.shape[0] != self.dwi.shape[1]:
            raise ValueError(f"Crops are (n1, n1, s), got {self.dwi.shape}")
        self.gt = np.asarray(self.gt, dtype=bool)

    @property
    def n1(self) -> int:
        return self.dwi.shape[0]

    @property
    def s(self) -> int:
        return self.dwi.shape[2]

    def channels(self) -> np.ndarray:
        return np.stack([self.dwi, self.swan, self.phase], axis=0)

    def with_channels(self, channels: np.ndarray) -> "Crop":
        return replace(self, dwi=channels[0], swan=channels[1], phase=channels[2])


@dataclass(frozen=True)
class RetentionSample:
    r: np.ndarray
    r_tilde: np.ndarray
    modalities: Tuple[str, ...] = MODALITIES

    def __post_init__(self) -> None:
        if self.r.shape != self.r_tilde.shape or self.r.shape != (len(self.modalities),):
            raise ValueError("r, r_tilde and modalities must have equal length")

    @classmethod
    def keep_all(cls, modalities: Tuple[str, ...] = MODALITIES) -> "RetentionSample":
        n = len(modalities)
        return cls(r=np.ones(n, dtype=np.int8), r_tilde=np.ones(n, dtype=np.float64), modalities=modalities)


class PatientScore(BaseModel):
    patient_id: str
    dice: float = Field(ge=0.0, le=1.0)
    fp_count: float = Field(ge=0.0)
    fp_size: float = Field(ge=0.0)
    fn_count: float = Field(ge=0.0)
    fn_size: float = Field(ge=0.0)
    detected: Optional[int] = None

    @field_validator("detected")
    @classmethod
    def binary_flag(cls, value: Optional[int]) -> Optional[int]:
        if value not in (None, 0, 1):
            raise ValueError("detected must be 0, 1 or not-applicable")
        return value
