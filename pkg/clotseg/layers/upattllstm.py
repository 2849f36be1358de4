"""UpAttLLSTM: slice-wise fusion feeding the Logic-LSTM, plus the segmentation loss."""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from clotseg.config.settings import FusionConfig, LLSTMConfig, ModelConfig, Settings
from clotseg.core.errors import ConfigError, DimensionError
from clotseg.core.logger import get_logger
from clotseg.layers.base import Module
from clotseg.layers.fusion import FusionBlock
from clotseg.layers.llstm import LogicLSTM, logic_cell_parameter_count, run_sequence
from clotseg.models.schemas import Crop, RetentionSample
from clotseg.services.moddrop import apply_crop
from clotseg.tensor import functional as F
from clotseg.tensor.tensor import DEFAULT_DTYPE, Tensor

logger = get_logger(__name__)

DICE_SMOOTH = 1.0
PROB_FLOOR = 1e-7


class UpAttLLSTM(Module):
    def __init__(
        self,
        fusion: FusionConfig,
        llstm: LLSTMConfig,
        model: ModelConfig,
        rng: np.random.Generator,
        dtype: np.dtype = DEFAULT_DTYPE,
    ) -> None:
        super().__init__()
        self.fusion_cfg = fusion
        self.llstm_cfg = llstm
        self.model_cfg = model
        self.dtype = dtype
        self.fusion = FusionBlock(fusion, rng, upsample=model.upsample, dtype=dtype)
        self.lstm = LogicLSTM(llstm, fusion.d_k, fusion.n1, rng, dtype)

    @classmethod
    def from_settings(cls, settings: Settings, seed: Optional[int] = None, dtype: np.dtype = DEFAULT_DTYPE) -> "UpAttLLSTM":
        rng = np.random.default_rng(settings.resolved_seed if seed is None else seed)
        model = cls(settings.fusion, settings.llstm, settings.model, rng, dtype)
        logger.info("UpAttLLSTM built with %d parameters (logic cell %d)", model.parameter_count(), model.cell_parameter_count())
        return model

    @property
    def n1(self) -> int:
        return self.fusion_cfg.n1

    @property
    def s(self) -> int:
        return self.model_cfg.s

    def cell_parameter_count(self) -> int:
        return logic_cell_parameter_count(self.llstm_cfg, self.fusion_cfg.d_k)

    def slice_features(self, channels: np.ndarray) -> List[Tensor]:
        """channels: (3, n1, n1, s) in DWI, SWAN, PHASE order; returns z5 per slice."""
        if channels.shape[:3] != (3, self.n1, self.n1):
            raise ConfigError(f"Model expects (3, {self.n1}, {self.n1}, s) inputs, got {channels.shape}")
        features = []
        for z in range(channels.shape[3]):
            dwi = Tensor(channels[0:1, :, :, z], dtype=self.dtype)
            swan_phase = Tensor(channels[1:3, :, :, z], dtype=self.dtype)
            features.append(self.fusion(dwi, swan_phase))
        return features

    def forward(self, crop: Crop, retention: Optional[RetentionSample] = None) -> Tensor:
        """Foreground probability of shape (n1, n1, s)."""
        if retention is not None:
            crop = apply_crop(crop, retention)
        return self.forward_channels(crop.channels())

    def forward_channels(self, channels: np.ndarray) -> Tensor:
        if channels.ndim != 4 or channels.shape[3] < 1:
            raise DimensionError(f"Expected (3, n1, n1, s) channels, got {channels.shape}")
        return run_sequence(self.slice_features(channels), self.lstm)


def cross_entropy(prob: Tensor, gt: np.ndarray) -> Tensor:
    """Mean two-class cross-entropy written in terms of the foreground probability."""
    target = Tensor(gt.astype(prob.dtype))
    background = Tensor((1.0 - gt).astype(prob.dtype))
    per_voxel = target * F.log(prob, floor=PROB_FLOOR) + background * F.log(1.0 - prob, floor=PROB_FLOOR)
    return -per_voxel.mean()


def soft_dice(prob: Tensor, gt: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    target = Tensor(gt.astype(prob.dtype))
    overlap = (prob * target).sum()
    return (overlap * 2.0 + smooth) / (prob.sum() + float(target.data.sum()) + smooth)


def loss(prob: Tensor, gt: np.ndarray, weights: Tuple[float, float] = (0.5, 0.5)) -> Tensor:
    """weights[0] * cross-entropy + weights[1] * (1 - soft Dice)."""
    gt = np.asarray(gt)
    if gt.shape != prob.shape:
        raise DimensionError(f"loss: prediction {prob.shape} and ground truth {gt.shape} differ")
    gt = gt.astype(np.float64)
    return cross_entropy(prob, gt) * weights[0] + (1.0 - soft_dice(prob, gt)) * weights[1]


__all__ = ["UpAttLLSTM", "cross_entropy", "loss", "soft_dice"]
