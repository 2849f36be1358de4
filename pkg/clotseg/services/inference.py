"""Sliding-window inference over the slice axis."""

from __future__ import annotations

from typing import Iterable, List, Optional, Tuple

import numpy as np

from clotseg.core.errors import CropError
from clotseg.core.logger import get_logger
from clotseg.data.sampling import inplane_origin
from clotseg.data.standardize import LandmarkModel, standardize
from clotseg.layers.upattllstm import UpAttLLSTM
from clotseg.models.schemas import MODALITIES, Volume
from clotseg.services.moddrop import mask_missing
from clotseg.services.postprocess import PostProcessor
from clotseg.tensor.tensor import no_grad

logger = get_logger(__name__)


def window_starts(depth: int, s: int, stride: int) -> List[int]:
    """Starts every `stride` slices, plus one final window flush with the last slice."""
    if depth < s:
        raise CropError(f"Volume has {depth} slices, fewer than the window depth {s}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    starts = list(range(0, depth - s + 1, stride))
    if starts[-1] != depth - s:
        starts.append(depth - s)
    return starts


def predict_volume(model: UpAttLLSTM, volume: Volume, s: Optional[int] = None, stride: Optional[int] = None) -> np.ndarray:
    """Foreground probability over the whole volume; voxels outside the in-plane window stay 0."""
    s = s or model.s
    stride = stride or model.model_cfg.window_stride
    n1 = model.n1
    ox, oy = inplane_origin(volume, n1)
    stacked = np.stack(
        [volume.modalities.get(name, np.zeros(volume.shape, dtype=np.float32)) for name in MODALITIES], axis=0
    )[:, ox : ox + n1, oy : oy + n1, :]
    total = np.zeros((n1, n1, volume.shape[2]), dtype=np.float64)
    counts = np.zeros(volume.shape[2], dtype=np.int64)
    with no_grad():
        for start in window_starts(volume.shape[2], s, stride):
            total[:, :, start : start + s] += model.forward_channels(stacked[..., start : start + s]).data
            counts[start : start + s] += 1
    prob = np.zeros(volume.shape, dtype=np.float32)
    prob[ox : ox + n1, oy : oy + n1, :] = (total / counts).astype(np.float32)
    return prob


class Segmenter:
    """Standardize, mask absent modalities, predict and refine one volume."""

    def __init__(
        self,
        model: UpAttLLSTM,
        postprocessor: PostProcessor,
        landmarks: Optional[LandmarkModel] = None,
        stride: Optional[int] = None,
    ) -> None:
        self.model = model
        self.postprocessor = postprocessor
        self.landmarks = landmarks
        self.stride = stride

    def prepare(self, volume: Volume, missing: Iterable[str] = ()) -> Volume:
        if self.landmarks is not None:
            volume = standardize(volume, self.landmarks)
        return mask_missing(volume, missing)

    def segment(self, volume: Volume, missing: Iterable[str] = ()) -> Tuple[np.ndarray, np.ndarray]:
        """Return the probability map and the refined thrombus mask.

        The lesion-distance stage reads the volume's `lesion` mask. That mask is an input delivered
        with the scan (the DWI infarct segmentation), never a model prediction; without it the
        lesion stage is skipped.
        """
        prepared = self.prepare(volume, missing)
        prob = predict_volume(self.model, prepared, stride=self.stride)
        mask = self.postprocessor.refine(prob, prepared.gt_lesion, prepared.spacing)
        return prob, mask


__all__ = ["Segmenter", "predict_volume", "window_starts"]
