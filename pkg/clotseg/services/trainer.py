"""Adam training loop with gradual modality dropout, checkpoints and transfer resume."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from clotseg.config.settings import Settings
from clotseg.core.errors import NonFiniteError, TrainingDivergedError
from clotseg.core.logger import get_logger
from clotseg.data.sampling import augment, sample_crops
from clotseg.layers.upattllstm import UpAttLLSTM, loss
from clotseg.models.schemas import Crop, Volume
from clotseg.services.checkpoint import Checkpoint, save_checkpoint
from clotseg.services.moddrop import ModalityDropout
from clotseg.tensor.tensor import Tensor

logger = get_logger(__name__)

LOG_COLUMNS = ["epoch", "step", "loss", "g_value", "lr"]


def training_rng(seed: int) -> np.random.Generator:
    """Training stream, kept apart from the per-volume phantom streams."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> Dict[str, float]:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    moments: AdamState,
    lr: float,
) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam update; advances moments.t and returns the new parameter arrays."""
    bad = sorted(name for name, grad in grads.items() if not np.all(np.isfinite(grad)))
    if bad:
        raise TrainingDivergedError(f"Non-finite gradients in {', '.join(bad)}")
    moments.t += 1
    t = moments.t
    b1, b2 = moments.beta1, moments.beta2
    updated: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        if grad.shape != value.shape:
            raise ValueError(f"Gradient for {name} has shape {grad.shape}, parameter has {value.shape}")
        m = b1 * moments.m.get(name, np.zeros_like(value)) + (1.0 - b1) * grad
        v = b2 * moments.v.get(name, np.zeros_like(value)) + (1.0 - b2) * grad * grad
        moments.m[name], moments.v[name] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + moments.eps)
    return updated


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    logger.debug("Clipping gradients: norm %.4f > %.4f", norm, max_norm)
    return {name: g * scale for name, g in grads.items()}, norm


def balanced_crops(
    volumes: Sequence[Volume],
    n1: int,
    s: int,
    crops_per_image: int,
    rng: np.random.Generator,
    augment_probability: float = 0.4,
    augment_sigma: float = 0.05,
) -> List[Crop]:
    """Positive and negative crops alternate, so consecutive pairs form balanced batches."""
    crops: List[Crop] = []
    for index in rng.permutation(len(volumes)):
        drawn: List[Crop] = []
        while len(drawn) < crops_per_image:
            drawn.extend(sample_crops(volumes[index], n1, s, rng))
        crops.extend(augment(crop, rng, augment_probability, augment_sigma) for crop in drawn[:crops_per_image])
    return crops


class Trainer:
    def __init__(
        self,
        model: UpAttLLSTM,
        settings: Settings,
        rng: Optional[np.random.Generator] = None,
        *,
        landmarks: Optional[Dict[str, np.ndarray]] = None,
        checkpoint_dir: Optional[Path] = None,
        log_path: Optional[Path] = None,
        progress: bool = True,
    ) -> None:
        self.model = model
        self.settings = settings
        self.rng = rng or training_rng(settings.resolved_seed)
        self.landmarks = landmarks or {}
        self.optimizer = AdamState()
        self.checkpoint_dir = checkpoint_dir
        self.log_path = log_path
        self.progress = progress
        self.history: List[Dict[str, float]] = []
        self.epochs_done = 0
        self.step = 0

    def reset_optimizer(self) -> None:
        self.optimizer = AdamState()

    def _params(self) -> Dict[str, Tensor]:
        return dict(self.model.named_parameters())

    def train_batch(self, batch: Sequence[Crop], retention) -> float:
        self.model.zero_grad()
        weights = self.settings.model.loss_weights
        try:
            terms = [loss(self.model(crop, retention), crop.gt, weights) for crop in batch]
            total = terms[0]
            for term in terms[1:]:
                total = total + term
            batch_loss = total / float(len(batch))
            value = batch_loss.item()
            batch_loss.backward()
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"Training diverged at step {self.step}: {exc}") from exc
        if not np.isfinite(value):
            raise TrainingDivergedError(f"Loss became non-finite at step {self.step}")

        params = self._params()
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
        grads, _ = clip_gradients(grads, self.settings.train.grad_clip)
        arrays = {name: p.data for name, p in params.items()}
        for name, array in adam_step(arrays, grads, self.optimizer, self.settings.train.lr).items():
            params[name].data = array
        return value

    def fit(self, volumes: Sequence[Volume], epochs: int, schedule_epochs: Optional[int] = None) -> Checkpoint:
        """Run `epochs` epochs; the dropout schedule spans `schedule_epochs` (defaults to `epochs`)."""
        if not volumes:
            raise ValueError("Training needs at least one volume")
        cfg = self.settings
        if epochs == 0:
            return self.snapshot()
        dropout = ModalityDropout(cfg.moddrop, schedule_epochs or epochs, self.rng)
        iterator = tqdm(range(epochs), desc="train", unit="epoch", disable=not self.progress)
        for epoch in iterator:
            g_value = dropout.value(epoch)
            crops = balanced_crops(
                volumes,
                cfg.fusion.n1,
                cfg.model.s,
                cfg.train.crops_per_image,
                self.rng,
                cfg.augment.probability,
                cfg.augment.noise_sigma,
            )
            losses = []
            for start in range(0, len(crops), cfg.train.batch_size):
                retention = dropout.sample(epoch)
                value = self.train_batch(crops[start : start + cfg.train.batch_size], retention)
                self.step += 1
                losses.append(value)
                self.history.append(
                    {
                        "epoch": self.epochs_done,
                        "step": self.step,
                        "loss": value,
                        "g_value": g_value if g_value is not None else float("nan"),
                        "lr": cfg.train.lr,
                    }
                )
            self.epochs_done += 1
            mean_loss = float(np.mean(losses))
            iterator.set_postfix(loss=f"{mean_loss:.4f}")
            logger.info("epoch %d loss=%.5f g=%s", self.epochs_done, mean_loss, g_value)
            self._write_log()
            if self.checkpoint_dir is not None and (
                self.epochs_done % cfg.train.checkpoint_every == 0 or epoch == epochs - 1
            ):
                ckpt = self.snapshot()
                save_checkpoint(ckpt, self.checkpoint_dir / f"epoch-{self.epochs_done:05d}.csck")
                save_checkpoint(ckpt, self.checkpoint_dir / "latest.csck")
        return self.snapshot()

    def epoch_losses(self) -> pd.Series:
        frame = pd.DataFrame(self.history, columns=LOG_COLUMNS)
        return frame.groupby("epoch")["loss"].mean()

    def _write_log(self) -> None:
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.history, columns=LOG_COLUMNS).to_csv(self.log_path, index=False)

    def snapshot(self) -> Checkpoint:
        return Checkpoint.capture(
            self.model.state(),
            self.settings,
            epoch=self.epochs_done,
            adam_t=self.optimizer.t,
            moment1=self.optimizer.m,
            moment2=self.optimizer.v,
            landmarks=self.landmarks,
            rng=self.rng,
            adam_hyper=self.optimizer.hyper(),
        )


def train(
    model: UpAttLLSTM,
    volumes: Sequence[Volume],
    settings: Settings,
    *,
    rng: Optional[np.random.Generator] = None,
    landmarks: Optional[Dict[str, np.ndarray]] = None,
    checkpoint_dir: Optional[Path] = None,
    log_path: Optional[Path] = None,
    progress: bool = True,
) -> Checkpoint:
    trainer = Trainer(
        model,
        settings,
        rng,
        landmarks=landmarks,
        checkpoint_dir=checkpoint_dir,
        log_path=log_path,
        progress=progress,
    )
    return trainer.fit(volumes, settings.train.epochs)


def model_from_checkpoint(ckpt: Checkpoint, settings: Optional[Settings] = None) -> UpAttLLSTM:
    """Build a model for `settings` (default: the snapshot's) and load the stored parameters."""
    settings = settings or ckpt.settings()
    model = UpAttLLSTM(settings.fusion, settings.llstm, settings.model, np.random.default_rng(0))
    model.load_state(ckpt.params)
    return model


def resume_transfer(
    ckpt: Checkpoint,
    settings: Settings,
    volumes: Sequence[Volume],
    *,
    rng: Optional[np.random.Generator] = None,
    checkpoint_dir: Optional[Path] = None,
    log_path: Optional[Path] = None,
    progress: bool = True,
) -> Checkpoint:
    """Fine-tune a pretrained checkpoint for the extra epochs with a fresh schedule clock and optimizer.

    Without an explicit `rng` the generator stored in the checkpoint continues the stream, so a
    resume is reproducible from the checkpoint file alone.
    """
    model = model_from_checkpoint(ckpt, settings)
    if rng is None:
        rng = ckpt.restore_rng()
    trainer = Trainer(
        model,
        settings,
        rng,
        landmarks=ckpt.landmarks,
        checkpoint_dir=checkpoint_dir,
        log_path=log_path,
        progress=progress,
    )
    trainer.epochs_done = ckpt.epoch
    extra = settings.train.extra_epochs_on_resume
    logger.info("Resuming from epoch %d for %d extra epochs (schedule clock reset)", ckpt.epoch, extra)
    return trainer.fit(volumes, extra, schedule_epochs=extra)


__all__ = [
    "AdamState",
    "LOG_COLUMNS",
    "Trainer",
    "adam_step",
    "balanced_crops",
    "clip_gradients",
    "model_from_checkpoint",
    "resume_transfer",
    "train",
    "training_rng",
]
