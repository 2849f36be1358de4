"""Connected-component refinement of the thresholded thrombus prediction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from clotseg.config.settings import PostprocessConfig
from clotseg.core.logger import get_logger

logger = get_logger(__name__)


def structure(connectivity: int = 26) -> np.ndarray:
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


@dataclass
class Component:
    id: int
    voxel_count: int
    center_of_mass: np.ndarray
    voxels: np.ndarray


@dataclass
class ComponentSet:
    labels: np.ndarray
    components: List[Component] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.components)

    @property
    def mask(self) -> np.ndarray:
        return self.labels > 0

    @property
    def counts(self) -> List[int]:
        return [comp.voxel_count for comp in self.components]

    def subset(self, keep: Sequence[Component]) -> "ComponentSet":
        ids = [comp.id for comp in keep]
        labels = np.where(np.isin(self.labels, ids), self.labels, 0)
        return ComponentSet(labels=labels, components=list(keep))


def connected_components(mask: np.ndarray, connectivity: int = 26) -> ComponentSet:
    """Label the foreground; ids follow first appearance in a row-major scan."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=structure(connectivity))
    components: List[Component] = []
    if count:
        coords = np.argwhere(labels)
        order = labels[tuple(coords.T)]
        grouped = coords[np.argsort(order, kind="stable")]
        sizes = np.bincount(order, minlength=count + 1)[1:]
        for label, voxels in enumerate(np.split(grouped, np.cumsum(sizes)[:-1]), start=1):
            components.append(
                Component(id=label, voxel_count=len(voxels), center_of_mass=voxels.mean(axis=0), voxels=voxels)
            )
    return ComponentSet(labels=labels.astype(np.int32), components=components)


def filter_small(cs: ComponentSet, n_pixels: int) -> ComponentSet:
    return cs.subset([comp for comp in cs.components if comp.voxel_count >= n_pixels])


def keep_biggest(cs: ComponentSet, alpha: float = 1.0) -> ComponentSet:
    """Keep components of at least alpha * the largest size; ties on the maximum all survive."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if not cs.components:
        return cs
    floor = alpha * max(cs.counts)
    return cs.subset([comp for comp in cs.components if comp.voxel_count >= floor])


def center_of_mass(mask: np.ndarray) -> Optional[np.ndarray]:
    coords = np.argwhere(mask)
    return coords.mean(axis=0) if len(coords) else None


def lesion_distance_filter(
    cs: ComponentSet,
    lesion: np.ndarray,
    n_dist: float,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> ComponentSet:
    """Keep components whose lesion distance is within n_dist (strictly) of the closest one."""
    lesion_center = center_of_mass(np.asarray(lesion, dtype=bool))
    if lesion_center is None:
        logger.warning("Lesion mask is empty; skipping the lesion-distance filter")
        return cs
    if not cs.components:
        return cs
    scale = np.asarray(spacing, dtype=np.float64)
    distances = np.array([np.linalg.norm((comp.center_of_mass - lesion_center) * scale) for comp in cs.components])
    nearest = distances.min()
    return cs.subset([comp for comp, d in zip(cs.components, distances) if abs(d - nearest) < n_dist])


def threshold_growth(prob: np.ndarray, mask: np.ndarray, threshold: float, connectivity: int = 26) -> np.ndarray:
    """Grow the mask into connected voxels whose probability exceeds the threshold; never shrinks."""
    mask = np.asarray(mask, dtype=bool)
    if prob.shape != mask.shape:
        raise ValueError(f"probability {prob.shape} and mask {mask.shape} differ in shape")
    if not mask.any():
        return mask.copy()
    allowed = (np.asarray(prob) > threshold) | mask
    return ndimage.binary_propagation(mask, structure=structure(connectivity), mask=allowed)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) > threshold


class PostProcessor:
    """filter_small, lesion_distance_filter, keep_biggest, then threshold_growth."""

    def __init__(self, cfg: PostprocessConfig, growth_threshold: float = 0.3) -> None:
        self.cfg = cfg
        self.growth_threshold = growth_threshold

    def refine(
        self,
        prob: np.ndarray,
        lesion: Optional[np.ndarray] = None,
        spacing: Sequence[float] = (1.0, 1.0, 1.0),
    ) -> np.ndarray:
        cfg = self.cfg
        cs = connected_components(binarize(prob, cfg.base_threshold), cfg.connectivity)
        raw_count = len(cs)
        if cfg.use_small:
            cs = filter_small(cs, cfg.n_pixels)
        if cfg.use_lesion:
            if lesion is None:
                logger.warning("No lesion mask supplied; skipping the lesion-distance filter")
            else:
                cs = lesion_distance_filter(cs, lesion, cfg.n_dist, spacing)
        if cfg.use_big:
            cs = keep_biggest(cs, cfg.alpha_big)
        mask = cs.mask
        if cfg.use_growth:
            mask = threshold_growth(prob, mask, self.growth_threshold, cfg.connectivity)
        logger.debug("Post-processing kept %d of %d components, %d voxels", len(cs), raw_count, int(mask.sum()))
        return mask


__all__ = [
    "Component",
    "ComponentSet",
    "PostProcessor",
    "binarize",
    "center_of_mass",
    "connected_components",
    "filter_small",
    "keep_biggest",
    "lesion_distance_filter",
    "threshold_growth",
]
