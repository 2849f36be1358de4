from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from clotseg.core.errors import ConfigError
from clotseg.models.schemas import MODALITIES

ROOT_DIR = Path(__file__).resolve().parents[2]
load_dotenv(ROOT_DIR / ".env")
DEFAULT_CONFIG_PATH = ROOT_DIR / "configs" / "config.yaml"
EXAMPLE_CONFIG_PATH = ROOT_DIR / "configs" / "config.example.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModDropConfig(_Section):
    enabled: bool = True
    keep_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    noise_sigma: float = Field(default=0.01, ge=0.0)
    droppable: List[str] = Field(default_factory=lambda: ["PHASE"])
    gradual: bool = True

    @field_validator("droppable", mode="before")
    @classmethod
    def split_names(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [name.strip() for name in value.split(",") if name.strip()]
        return value

    @field_validator("droppable")
    @classmethod
    def known_modalities(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in MODALITIES]
        if unknown:
            raise ValueError(f"unknown modalities {unknown}; expected a subset of {list(MODALITIES)}")
        return value


class FusionConfig(_Section):
    n1: int = Field(default=256, ge=1)
    p1: int = Field(default=32, ge=1)
    p2: int = Field(default=4, ge=1)
    d_k: int = Field(default=32, ge=1)
    mlp_hidden: int = Field(default=32, ge=1)

    @model_validator(mode="after")
    def patch_sizes_divide(self) -> "FusionConfig":
        if self.p1 % self.p2:
            raise ValueError(f"fusion.p2={self.p2} must divide fusion.p1={self.p1}")
        if self.n1 % self.p1:
            raise ValueError(f"fusion.p1={self.p1} must divide fusion.n1={self.n1}")
        if self.n1 % self.p2:
            raise ValueError(f"fusion.p2={self.p2} must divide fusion.n1={self.n1}")
        return self

    @property
    def q_side(self) -> int:
        return self.n1 // self.p1

    @property
    def kv_side(self) -> int:
        return self.n1 // self.p2

    @property
    def up_factor(self) -> int:
        return self.p1 // self.p2


class LLSTMConfig(_Section):
    n_c: int = Field(default=4, ge=1)
    n_l: int = Field(default=9, ge=1)
    m: int = Field(default=3, ge=1)
    w: int = Field(default=3, ge=1)
    forget_bias: float = 1.0
    n4: Optional[int] = None

    @model_validator(mode="after")
    def logic_channels_consistent(self) -> "LLSTMConfig":
        if self.n_l % self.m:
            raise ValueError(
                f"llstm.m={self.m} must divide llstm.n_l={self.n_l} (transfer groups need n_l = k*m); "
                f"try n_l={self.m * max(1, round(self.n_l / self.m))}"
            )
        if self.w % 2 == 0:
            raise ValueError(f"llstm.w={self.w} must be odd for same-padding convolutions")
        if self.n4 is not None and self.n4 != self.n_l:
            raise ValueError(f"llstm.n4={self.n4} must equal llstm.n_l={self.n_l} for the shipped Logic wiring")
        return self

    @property
    def k(self) -> int:
        return self.n_l // self.m

    @property
    def hidden(self) -> int:
        return self.n_c + self.n_l

    def windows(self, n1: int) -> List[int]:
        return [min(n1, max(1, (2 * n1) // (2**i))) for i in range(1, self.k + 1)]


class ModelConfig(_Section):
    s: int = Field(default=12, ge=1)
    threshold: float = Field(default=0.3, gt=0.0, lt=1.0)
    loss_weights: Tuple[float, float] = (0.5, 0.5)
    stride: Optional[int] = Field(default=None, ge=1)
    upsample: bool = True

    @property
    def window_stride(self) -> int:
        return self.stride or max(1, self.s // 2)


class PostprocessConfig(_Section):
    n_pixels: int = Field(default=20, ge=0)
    n_dist: float = Field(default=20.0, ge=0.0)
    alpha_big: float = Field(default=1.0, gt=0.0, le=1.0)
    base_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    connectivity: Literal[6, 26] = 26
    use_small: bool = True
    use_lesion: bool = True
    use_big: bool = True
    use_growth: bool = True


class SynthConfig(_Section):
    shape: Tuple[int, int, int] = (256, 256, 36)
    brain_radii: Tuple[float, float, float] = (110.0, 115.0, 16.0)
    lesion_radius: Tuple[int, int] = (6, 10)
    thrombus_radius: Tuple[int, int] = (2, 3)
    max_distance: float = Field(default=6.0, ge=0.0)
    noise_sigma: float = Field(default=0.05, ge=0.0)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    distractor_count: int = Field(default=0, ge=0)
    contrast: Dict[str, Tuple[float, float]] = Field(
        default_factory=lambda: {"DWI": (1.0, 0.0), "SWAN": (0.0, -0.8), "PHASE": (0.0, 0.8)}
    )

    @model_validator(mode="after")
    def radii_ordered(self) -> "SynthConfig":
        if self.thrombus_radius[0] > self.thrombus_radius[1] or self.lesion_radius[0] > self.lesion_radius[1]:
            raise ValueError("radius ranges must be (low, high) with low <= high")
        if self.thrombus_radius[1] >= self.lesion_radius[0]:
            raise ValueError("synth.thrombus_radius must stay below synth.lesion_radius")
        if self.thrombus_radius[0] < 1:
            raise ValueError("synth.thrombus_radius must be at least one voxel")
        unknown = set(self.contrast) - set(MODALITIES)
        if unknown:
            raise ValueError(f"synth.contrast has unknown modalities {sorted(unknown)}")
        return self


class AugmentConfig(_Section):
    probability: float = Field(default=0.4, ge=0.0, le=1.0)
    noise_sigma: float = Field(default=0.05, ge=0.0)


class TrainConfig(_Section):
    lr: float = Field(default=0.01, gt=0.0)
    batch_size: int = Field(default=2, ge=1)
    crops_per_image: int = Field(default=4, ge=1)
    epochs: int = Field(default=100, ge=1)
    grad_clip: Optional[float] = Field(default=5.0, gt=0.0)
    checkpoint_every: int = Field(default=10, ge=1)
    checkpoint_dir: str = "./runs/checkpoints"
    resume_path: Optional[str] = None
    extra_epochs_on_resume: int = Field(default=400, ge=0)
    log_path: str = "./runs/train_log.csv"


class PathConfig(_Section):
    data_dir: str = "./data/phantoms"
    output_dir: str = "./runs"
    report_dir: str = "./evaluation/reports"


class Settings(_Section):
    seed: Optional[int] = None
    moddrop: ModDropConfig = Field(default_factory=ModDropConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    llstm: LLSTMConfig = Field(default_factory=LLSTMConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    postprocess: PostprocessConfig = Field(default_factory=PostprocessConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    paths: PathConfig = Field(default_factory=PathConfig)

    @property
    def resolved_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        env_seed = os.getenv("CLOTSEG_SEED")
        return int(env_seed) if env_seed else 0

    @property
    def data_path(self) -> Path:
        return (ROOT_DIR / self.paths.data_dir).resolve()

    @property
    def output_path(self) -> Path:
        return (ROOT_DIR / self.paths.output_dir).resolve()

    @property
    def report_path(self) -> Path:
        return (ROOT_DIR / self.paths.report_dir).resolve()

    @property
    def checkpoint_path(self) -> Path:
        return (ROOT_DIR / self.train.checkpoint_dir).resolve()

    @property
    def train_log_path(self) -> Path:
        return (ROOT_DIR / self.train.log_path).resolve()


def _load_yaml(path: Path) -> dict[str, Any]:
    if not path.exists():
        return {}
    with path.open("r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return data


def _merge_dicts(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    result = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = _merge_dicts(result[key], value)
        else:
            result[key] = value
    return result


def _unflatten(data: dict[str, Any]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            value = _unflatten(value)
        parts = str(key).split(".")
        cursor = nested
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
            if not isinstance(cursor, dict):
                raise ConfigError(f"Key {key!r} collides with a scalar value")
        leaf = parts[-1]
        if isinstance(value, dict) and isinstance(cursor.get(leaf), dict):
            cursor[leaf] = _merge_dicts(cursor[leaf], value)
        else:
            cursor[leaf] = value
    return nested


def parse_overrides(flags: Sequence[str]) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for flag in flags:
        if "=" not in flag:
            raise ConfigError(f"Override {flag!r} must look like section.key=value")
        key, raw = flag.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"Override {flag!r} has an empty key")
        overrides[key] = yaml.safe_load(raw) if raw.strip() else None
    return _unflatten(overrides)


def build_settings(data: dict[str, Any]) -> Settings:
    try:
        return Settings(**_unflatten(data))
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_settings(config_path: Optional[Path] = None, overrides: Sequence[str] = ()) -> Settings:
    """Resolve defaults, the example file, the config file and dotted overrides, in that order."""
    path = config_path or Path(os.getenv("CLOTSEG_CONFIG_PATH", DEFAULT_CONFIG_PATH))
    if config_path is not None and not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    example_data = _unflatten(_load_yaml(EXAMPLE_CONFIG_PATH))
    primary_data = _unflatten(_load_yaml(path))
    data = _merge_dicts(example_data, primary_data)
    data = _merge_dicts(data, parse_overrides(overrides))
    return build_settings(data)


def with_overrides(settings: Settings, overrides: Sequence[str]) -> Settings:
    """Copy of `settings` with dotted `key=value` overrides applied and re-validated."""
    return build_settings(_merge_dicts(settings.model_dump(mode="json"), parse_overrides(overrides)))


def flatten_settings(settings: Settings) -> Dict[str, str]:
    """Render the settings tree as sorted dotted keys with YAML-flow scalar values."""
    flat: Dict[str, str] = {}

    def _walk(prefix: str, value: Any) -> None:
        if isinstance(value, dict):
            for key in sorted(value):
                _walk(f"{prefix}.{key}" if prefix else str(key), value[key])
            return
        flat[prefix] = yaml.safe_dump(value, default_flow_style=True, width=10_000).strip().removesuffix("\n...").strip()

    _walk("", settings.model_dump(mode="json"))
    return dict(sorted(flat.items()))


def settings_from_flat(flat: Dict[str, str]) -> Settings:
    data = {key: yaml.safe_load(value) for key, value in flat.items()}
    return build_settings(data)


__all__: List[str] = [
    "Settings",
    "ModDropConfig",
    "FusionConfig",
    "LLSTMConfig",
    "ModelConfig",
    "PostprocessConfig",
    "SynthConfig",
    "AugmentConfig",
    "TrainConfig",
    "PathConfig",
    "flatten_settings",
    "settings_from_flat",
    "load_settings",
    "with_overrides",
]
