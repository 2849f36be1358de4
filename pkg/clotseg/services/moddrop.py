"""Gradual modality dropout: per-batch retention coefficients for whole input channels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple, Union

import numpy as np

from clotseg.config.settings import ModDropConfig
from clotseg.core.errors import DimensionError
from clotseg.core.logger import get_logger
from clotseg.models.schemas import MODALITIES, Crop, RetentionSample, Volume

logger = get_logger(__name__)

ModalityRef = Union[int, str]


@dataclass(frozen=True)
class DropoutSchedule:
    keep_prob: float
    total_epochs: int
    noise_sigma: float = 0.01
    droppable: Tuple[str, ...] = ("PHASE",)
    gradual: bool = True
    modalities: Tuple[str, ...] = MODALITIES

    def __post_init__(self) -> None:
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in [0, 1], got {self.keep_prob}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be positive, got {self.total_epochs}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        unknown = set(self.droppable) - set(self.modalities)
        if unknown:
            raise ValueError(f"droppable modalities {sorted(unknown)} are not in {list(self.modalities)}")

    @classmethod
    def from_config(cls, cfg: ModDropConfig, total_epochs: int) -> "DropoutSchedule":
        return cls(
            keep_prob=cfg.keep_prob,
            total_epochs=total_epochs,
            noise_sigma=cfg.noise_sigma,
            droppable=tuple(cfg.droppable),
            gradual=cfg.gradual,
        )


def schedule_value(t: int, total_epochs: int) -> float:
    """0.75 / 0.5 / 0.25 / 0 over the four quarters of training, with strict boundaries."""
    if total_epochs < 1 or not 0 <= t < total_epochs:
        raise ValueError(f"epoch {t} outside [0, {total_epochs})")
    # integer comparisons keep the quarter boundaries exact
    if 4 * t < total_epochs:
        return 0.75
    if 2 * t < total_epochs:
        return 0.5
    if 4 * t < 3 * total_epochs:
        return 0.25
    return 0.0


def sample_retention(sched: DropoutSchedule, t: int, rng: np.random.Generator) -> RetentionSample:
    """Draw r ~ Bernoulli(keep_prob) per droppable modality; dropped ones get g(t) + noise, clamped."""
    g = schedule_value(t, sched.total_epochs)
    r = np.ones(len(sched.modalities), dtype=np.int8)
    r_tilde = np.ones(len(sched.modalities), dtype=np.float64)
    for j, name in enumerate(sched.modalities):
        if name not in sched.droppable:
            continue
        if rng.random() < sched.keep_prob:
            continue
        r[j] = 0
        if sched.gradual:
            noise = rng.normal(0.0, sched.noise_sigma) if sched.noise_sigma > 0 else 0.0
            r_tilde[j] = float(np.clip(g + noise, 0.0, 1.0))
        else:
            r_tilde[j] = 0.0
    return RetentionSample(r=r, r_tilde=r_tilde, modalities=sched.modalities)


def _check_sample(names: Tuple[str, ...], sample: RetentionSample) -> None:
    if tuple(names) != tuple(sample.modalities):
        raise DimensionError(f"Retention covers {list(sample.modalities)} but the input holds {list(names)}")


def apply(x: Volume, sample: RetentionSample) -> Volume:
    """x~ = r~ * x, channel by channel."""
    _check_sample(x.names, sample)
    scaled = {
        name: x.modalities[name] if coeff == 1.0 else (x.modalities[name] * np.float32(coeff)).astype(np.float32)
        for name, coeff in zip(sample.modalities, sample.r_tilde)
    }
    return x.copy(modalities=scaled)


def apply_channels(channels: np.ndarray, sample: RetentionSample) -> np.ndarray:
    if channels.shape[0] != len(sample.r_tilde):
        raise DimensionError(f"Retention has {len(sample.r_tilde)} entries for {channels.shape[0]} channels")
    if np.all(sample.r_tilde == 1.0):
        return channels
    coeffs = sample.r_tilde.astype(channels.dtype).reshape((-1,) + (1,) * (channels.ndim - 1))
    return channels * coeffs


def apply_crop(crop: Crop, sample: RetentionSample) -> Crop:
    _check_sample(MODALITIES, sample)
    return crop.with_channels(apply_channels(crop.channels(), sample))


def _resolve(names: Tuple[str, ...], missing: Iterable[ModalityRef]) -> set:
    resolved = set()
    for ref in missing:
        if isinstance(ref, (int, np.integer)):
            if not 0 <= ref < len(names):
                raise IndexError(f"Modality index {ref} out of range for {list(names)}")
            resolved.add(names[ref])
        elif ref in names:
            resolved.add(ref)
        else:
            raise KeyError(f"Unknown modality {ref!r}; expected one of {list(names)}")
    return resolved


def mask_missing(x: Volume, missing: Iterable[ModalityRef]) -> Volume:
    """Replace the listed modalities with black images and flag them absent."""
    gone = _resolve(x.names, missing)
    if not gone:
        return x
    modalities = {name: np.zeros_like(arr) if name in gone else arr for name, arr in x.modalities.items()}
    presence = {name: (False if name in gone else flag) for name, flag in x.presence.items()}
    return x.copy(modalities=modalities, presence=presence)


def mask_crop(crop: Crop, missing: Iterable[ModalityRef]) -> Crop:
    gone = _resolve(MODALITIES, missing)
    channels = crop.channels().copy()
    for j, name in enumerate(MODALITIES):
        if name in gone:
            channels[j] = 0.0
    return crop.with_channels(channels)


class ModalityDropout:
    """Training-time sampler bound to one schedule and one RNG stream."""

    def __init__(self, cfg: ModDropConfig, total_epochs: int, rng: np.random.Generator) -> None:
        self.enabled = cfg.enabled
        self.schedule = DropoutSchedule.from_config(cfg, total_epochs)
        self.rng = rng

    def sample(self, epoch: int) -> RetentionSample:
        if not self.enabled:
            return RetentionSample.keep_all(self.schedule.modalities)
        return sample_retention(self.schedule, epoch, self.rng)

    def value(self, epoch: int) -> Optional[float]:
        return schedule_value(epoch, self.schedule.total_epochs) if self.enabled else None


__all__ = [
    "DropoutSchedule",
    "ModalityDropout",
    "apply",
    "apply_channels",
    "apply_crop",
    "mask_crop",
    "mask_missing",
    "sample_retention",
    "schedule_value",
]
