"""Balanced crop sampling around the thrombus and training-time augmentation."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from clotseg.core.errors import CropError
from clotseg.core.logger import get_logger
from clotseg.models.schemas import Crop, Volume

logger = get_logger(__name__)

FLIP_AXES = (0, 1, 2)


def inplane_origin(vol: Volume, n1: int) -> Tuple[int, int]:
    """Top-left corner of the n1 x n1 window centred on the brain centre of mass, clamped to bounds."""
    x, y, _ = vol.shape
    if x < n1 or y < n1:
        raise CropError(f"Volume plane {x}x{y} is smaller than the crop side {n1}")
    coords = np.argwhere(vol.foreground())
    center = coords.mean(axis=0)[:2] if len(coords) else np.array([(x - 1) / 2.0, (y - 1) / 2.0])
    ox = int(np.clip(int(round(center[0])) - n1 // 2, 0, x - n1))
    oy = int(np.clip(int(round(center[1])) - n1 // 2, 0, y - n1))
    return ox, oy


def crop_at(vol: Volume, origin: Tuple[int, int, int], n1: int, s: int) -> Crop:
    ox, oy, oz = origin
    window = (slice(ox, ox + n1), slice(oy, oy + n1), slice(oz, oz + s))

    def plane(name: str) -> np.ndarray:
        data = vol.modalities.get(name)
        return np.zeros((n1, n1, s), dtype=np.float32) if data is None else data[window].copy()

    gt = vol.gt_thrombus[window].copy() if vol.gt_thrombus is not None else np.zeros((n1, n1, s), dtype=bool)
    lesion = vol.gt_lesion[window].copy() if vol.gt_lesion is not None else None
    return Crop(
        dwi=plane("DWI"),
        swan=plane("SWAN"),
        phase=plane("PHASE"),
        gt=gt,
        contains_target=bool(gt.any()),
        lesion=lesion,
        origin=origin,
    )


def _thrombus_slices(vol: Volume) -> np.ndarray:
    if vol.gt_thrombus is None:
        raise CropError("Volume carries no thrombus mask")
    return vol.gt_thrombus.sum(axis=(0, 1))


def positive_start(per_slice: np.ndarray, s: int, rng: np.random.Generator) -> int:
    depth = len(per_slice)
    hit = np.flatnonzero(per_slice)
    if not len(hit):
        raise CropError("Volume has no thrombus voxels to centre a positive crop on")
    z0, z1 = int(hit[0]), int(hit[-1])
    if z1 - z0 + 1 > s:
        logger.warning("Thrombus spans %d slices but crops hold %d; using a maximal sub-range", z1 - z0 + 1, s)
        return int(rng.integers(z0, z1 - s + 2))
    low, high = max(0, z1 - s + 1), min(z0, depth - s)
    return int(rng.integers(low, high + 1))


def negative_start(per_slice: np.ndarray, s: int, rng: np.random.Generator) -> int:
    windows = np.convolve(per_slice, np.ones(s, dtype=per_slice.dtype), mode="valid")
    empty = np.flatnonzero(windows == 0)
    if not len(empty):
        raise CropError(f"No {s}-slice window free of thrombus voxels")
    return int(empty[rng.integers(len(empty))])


def sample_crops(vol: Volume, n1: int, s: int, rng: np.random.Generator) -> Tuple[Crop, Crop]:
    """One crop whose slices cover the thrombus and one whose slices hold none of it."""
    depth = vol.shape[2]
    if depth < s:
        raise CropError(f"Volume has {depth} slices, fewer than the crop depth {s}")
    per_slice = _thrombus_slices(vol)
    ox, oy = inplane_origin(vol, n1)
    positive = crop_at(vol, (ox, oy, positive_start(per_slice, s, rng)), n1, s)
    negative = crop_at(vol, (ox, oy, negative_start(per_slice, s, rng)), n1, s)
    return positive, negative


def augment(crop: Crop, rng: np.random.Generator, probability: float = 0.4, noise_sigma: float = 0.05) -> Crop:
    """Flip x, y, z and add Gaussian noise, each with the given probability; draws in that order."""
    draws = rng.random(len(FLIP_AXES) + 1) < probability
    channels = crop.channels()
    gt = crop.gt
    lesion = crop.lesion
    for axis, flip in zip(FLIP_AXES, draws[:-1]):
        if flip:
            channels = np.flip(channels, axis=axis + 1)
            gt = np.flip(gt, axis=axis)
            lesion = np.flip(lesion, axis=axis) if lesion is not None else None
    if draws[-1] and noise_sigma > 0:
        channels = channels + rng.normal(0.0, noise_sigma, size=channels.shape).astype(channels.dtype)
    channels = np.ascontiguousarray(channels)
    return Crop(
        dwi=channels[0],
        swan=channels[1],
        phase=channels[2],
        gt=np.ascontiguousarray(gt),
        contains_target=crop.contains_target,
        lesion=np.ascontiguousarray(lesion) if lesion is not None else None,
        origin=crop.origin,
    )


__all__ = ["augment", "crop_at", "inplane_origin", "negative_start", "positive_start", "sample_crops"]
