"""Synthetic multimodal phantoms: brain ellipsoid, DWI-visible lesion, susceptibility-visible thrombus."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from clotseg.config.settings import SynthConfig
from clotseg.core.errors import PlacementError
from clotseg.core.logger import get_logger
from clotseg.models.schemas import LESION, MODALITIES, THROMBUS, Volume

logger = get_logger(__name__)

MAX_ATTEMPTS = 1000
BRAIN_INTENSITY = 1.0


def phantom_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per volume, derived from (base seed, volume index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _grid(shape: Tuple[int, int, int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.ogrid[: shape[0], : shape[1], : shape[2]]


def ball(shape: Tuple[int, int, int], center: np.ndarray, radius: float) -> np.ndarray:
    gx, gy, gz = _grid(shape)
    return (gx - center[0]) ** 2 + (gy - center[1]) ** 2 + (gz - center[2]) ** 2 <= radius**2


def brain_mask(shape: Tuple[int, int, int], radii: Tuple[float, float, float]) -> np.ndarray:
    center = (np.asarray(shape) - 1) / 2.0
    gx, gy, gz = _grid(shape)
    return ((gx - center[0]) / radii[0]) ** 2 + ((gy - center[1]) / radii[1]) ** 2 + ((gz - center[2]) / radii[2]) ** 2 <= 1.0


def _fits(blob: np.ndarray, brain: np.ndarray, center: np.ndarray) -> bool:
    inside = np.all(center >= 0) and np.all(center < np.asarray(brain.shape))
    return bool(inside and blob.any() and not np.any(blob & ~brain))


def _place_lesion(spec: SynthConfig, brain: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, int, np.ndarray]:
    candidates = np.argwhere(brain)
    for _ in range(MAX_ATTEMPTS):
        radius = int(rng.integers(spec.lesion_radius[0], spec.lesion_radius[1] + 1))
        center = candidates[rng.integers(len(candidates))]
        blob = ball(brain.shape, center, radius)
        if _fits(blob, brain, center):
            return center, radius, blob
    raise PlacementError(f"Could not place a lesion inside the brain after {MAX_ATTEMPTS} attempts")


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    direction = rng.normal(size=3)
    norm = np.linalg.norm(direction)
    return direction / norm if norm > 0 else np.array([1.0, 0.0, 0.0])


def boundary_distance(center: np.ndarray, lesion_center: np.ndarray, lesion_radius: float) -> float:
    """Distance from a point to the lesion sphere surface."""
    return abs(float(np.linalg.norm(center - lesion_center)) - lesion_radius)


def _place_thrombus(
    spec: SynthConfig,
    brain: np.ndarray,
    lesion_center: np.ndarray,
    lesion_radius: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, int, np.ndarray]:
    for _ in range(MAX_ATTEMPTS):
        radius = int(rng.integers(spec.thrombus_radius[0], spec.thrombus_radius[1] + 1))
        reach = lesion_radius + rng.uniform(-spec.max_distance, spec.max_distance)
        center = np.rint(lesion_center + reach * _random_direction(rng)).astype(int)
        if boundary_distance(center, lesion_center, lesion_radius) > spec.max_distance:
            continue
        blob = ball(brain.shape, center, radius)
        if _fits(blob, brain, center):
            return center, radius, blob
    raise PlacementError(
        f"Could not place a thrombus within {spec.max_distance} voxels of the lesion boundary after {MAX_ATTEMPTS} attempts"
    )


def _place_distractors(
    spec: SynthConfig,
    brain: np.ndarray,
    keep_out: np.ndarray,
    lesion_center: np.ndarray,
    lesion_radius: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """SWAN-only dark spots well away from the lesion; never part of the ground truth."""
    spots = np.zeros(brain.shape, dtype=bool)
    candidates = np.argwhere(brain)
    min_gap = lesion_radius + spec.max_distance + 2 * spec.thrombus_radius[1]
    for index in range(spec.distractor_count):
        for _ in range(MAX_ATTEMPTS):
            center = candidates[rng.integers(len(candidates))]
            if np.linalg.norm(center - lesion_center) <= min_gap:
                continue
            radius = int(rng.integers(spec.thrombus_radius[0], spec.thrombus_radius[1] + 1))
            blob = ball(brain.shape, center, radius)
            grown = ball(brain.shape, center, radius + 2)
            if _fits(blob, brain, center) and not np.any(grown & (keep_out | spots)):
                spots |= blob
                break
        else:
            logger.warning("Distractor %d could not be placed; continuing with %d", index, index)
            break
    return spots


def generate_phantom(spec: SynthConfig, rng: np.random.Generator) -> Volume:
    shape = tuple(spec.shape)
    brain = brain_mask(shape, spec.brain_radii)
    if not brain.any():
        raise PlacementError(f"Brain radii {spec.brain_radii} leave no voxel inside a {shape} volume")
    lesion_center, lesion_radius, lesion = _place_lesion(spec, brain, rng)
    _, _, thrombus = _place_thrombus(spec, brain, lesion_center, lesion_radius, rng)
    distractors = _place_distractors(spec, brain, lesion | thrombus, lesion_center, lesion_radius, rng)

    modalities = {}
    for name in MODALITIES:
        lesion_offset, thrombus_offset = spec.contrast.get(name, (0.0, 0.0))
        data = np.where(brain, BRAIN_INTENSITY, 0.0)
        data = data + lesion_offset * lesion + thrombus_offset * thrombus
        if name == "SWAN":
            data = data + thrombus_offset * distractors
        if spec.noise_sigma > 0:
            data[brain] += rng.normal(0.0, spec.noise_sigma, size=int(brain.sum()))
        modalities[name] = data.astype(np.float32)
    return Volume(
        modalities=modalities,
        spacing=tuple(spec.spacing),
        masks={THROMBUS: thrombus, LESION: lesion},
    )


def generate_cohort(spec: SynthConfig, count: int, seed: int, start: int = 0, log_every: Optional[int] = None) -> list:
    volumes = []
    for index in range(start, start + count):
        volumes.append(generate_phantom(spec, phantom_rng(seed, index)))
        if log_every and (index - start + 1) % log_every == 0:
            logger.info("Generated %d/%d phantoms", index - start + 1, count)
    return volumes


__all__ = [
    "ball",
    "boundary_distance",
    "brain_mask",
    "generate_cohort",
    "generate_phantom",
    "phantom_rng",
]
