from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from clotseg.config.settings import FusionConfig, LLSTMConfig, ModelConfig, Settings, SynthConfig, load_settings
from clotseg.data.phantom import generate_phantom, phantom_rng
from clotseg.layers.upattllstm import UpAttLLSTM
from clotseg.models.schemas import Volume

EMPTY_CONFIG_NAME = "empty.yaml"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def empty_config(tmp_path: Path) -> Path:
    path = tmp_path / EMPTY_CONFIG_NAME
    path.write_text("# no overrides\n", encoding="utf-8")
    return path


@pytest.fixture
def small_synth() -> SynthConfig:
    return SynthConfig(
        shape=(24, 24, 12),
        brain_radii=(10.0, 10.0, 5.0),
        lesion_radius=(2, 3),
        thrombus_radius=(1, 1),
        max_distance=2.0,
        noise_sigma=0.05,
    )


@pytest.fixture
def phantom(small_synth: SynthConfig) -> Volume:
    return generate_phantom(small_synth, phantom_rng(7, 0))


@pytest.fixture
def tiny_settings(empty_config: Path, tmp_path: Path) -> Settings:
    """Smallest model that still runs the full pipeline on `small_synth` phantoms."""
    return load_settings(
        empty_config,
        overrides=[
            "seed=3",
            "fusion.n1=16",
            "fusion.p1=8",
            "fusion.p2=2",
            "fusion.d_k=4",
            "fusion.mlp_hidden=4",
            "llstm.n_c=2",
            "llstm.n_l=2",
            "llstm.m=1",
            "model.s=4",
            "synth.shape=[24, 24, 12]",
            "synth.brain_radii=[10.0, 10.0, 5.0]",
            "synth.lesion_radius=[2, 3]",
            "synth.thrombus_radius=[1, 1]",
            "synth.max_distance=2.0",
            "train.epochs=2",
            "train.crops_per_image=2",
            "train.checkpoint_every=1",
            f"train.checkpoint_dir={tmp_path / 'ckpt'}",
            f"train.log_path={tmp_path / 'train_log.csv'}",
            f"paths.data_dir={tmp_path / 'data'}",
            f"paths.output_dir={tmp_path / 'runs'}",
            f"paths.report_dir={tmp_path / 'reports'}",
        ],
    )


@pytest.fixture
def desk_model() -> UpAttLLSTM:
    return UpAttLLSTM(
        FusionConfig(n1=16, p1=8, p2=2, d_k=4, mlp_hidden=4),
        LLSTMConfig(n_c=2, n_l=2, m=1, w=3),
        ModelConfig(s=2),
        np.random.default_rng(0),
    )


def flood_fill_labels(mask: np.ndarray, connectivity: int) -> list:
    """Breadth-first components as sorted tuples of voxel coordinates."""
    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0) and (connectivity == 26 or abs(dx) + abs(dy) + abs(dz) == 1)
    ]
    seen = np.zeros(mask.shape, dtype=bool)
    components = []
    for start in map(tuple, np.argwhere(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, members = [start], []
        while queue:
            voxel = queue.pop()
            members.append(voxel)
            for off in offsets:
                nxt = tuple(v + o for v, o in zip(voxel, off))
                if all(0 <= n < s for n, s in zip(nxt, mask.shape)) and mask[nxt] and not seen[nxt]:
                    seen[nxt] = True
                    queue.append(nxt)
        components.append(tuple(sorted(members)))
    return components


@pytest.fixture
def flood_fill():
    return flood_fill_labels
