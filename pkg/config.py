from pathlib import Path
from typing import Dict, Literal, Mapping, Optional, Union

from dotenv import load_dotenv
from pydantic import Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError
from logger import logger
from models import (
    AugmentConfig,
    ClassNetConfig,
    DatasetConfig,
    FloatPair,
    IntTuple,
    LossWeights,
    PseudoLabelConfig,
)

# Load MIXCAM_* variables from a .env file when present
load_dotenv()

RESOLVED_CONFIG_NAME = "config.resolved"


class RunConfig(BaseSettings):
    """
    Every knob of a run in one flat namespace.

    Precedence: explicit keyword arguments (config file + CLI flags, merged by
    `resolve_config`) > MIXCAM_* environment variables > field defaults.
    Tuple fields read from the environment must be JSON (e.g. "[0.8, 1.0]").
    """

    model_config = SettingsConfigDict(env_prefix="MIXCAM_", extra="forbid")

    # ==================== DATASET ====================
    num_classes: int = Field(5, ge=2, le=5)
    image_size: int = Field(64, ge=8)
    shapes_min: int = Field(1, ge=1)
    shapes_max: int = Field(3, ge=1)
    size_range: FloatPair = (0.3, 0.5)
    texture_amplitude: float = 0.15
    color_noise: float = 0.05
    train_size: int = Field(2000, ge=0)
    val_size: int = Field(500, ge=0)
    min_visible: float = 0.3
    max_attempts: int = 100

    # ==================== NETWORK ====================
    block_channels: IntTuple = (16, 32, 64, 64)
    block_strides: IntTuple = (2, 2, 2, 1)
    kernel_size: int = 3

    # ==================== AUGMENTATION ====================
    alpha: float = Field(0.2, gt=0.0)
    mixup: bool = True
    flip_prob: float = 0.5
    crop_range: FloatPair = (0.8, 1.0)
    scale_range: FloatPair = (1.0, 1.25)
    jitter: float = 0.1

    # ==================== OBJECTIVE ====================
    lambda_ent: float = Field(0.02, ge=0.0)
    lambda_con: float = Field(2e-4, ge=0.0)

    # ==================== EVALUATION ====================
    tau_bg: float = Field(0.25, gt=0.0, lt=1.0)
    upsample: Literal["nearest", "bilinear"] = "bilinear"

    # ==================== SCHEDULE ====================
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    seed: int = Field(0, ge=0)
    out_dir: str = "runs/default"
    workers: int = Field(4, ge=1, description="Threads for data generation and evaluation")

    @model_validator(mode="after")
    def check_views(self):
        # Each typed view enforces its own invariants
        for view in (self.dataset_config, self.net_config, self.augment_config):
            try:
                view()
            except ValidationError as e:
                raise ValueError(first_error(e))
        return self

    # ==================== TYPED VIEWS ====================

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            num_classes=self.num_classes,
            image_size=self.image_size,
            shapes_min=self.shapes_min,
            shapes_max=self.shapes_max,
            size_range=self.size_range,
            texture_amplitude=self.texture_amplitude,
            color_noise=self.color_noise,
            train_size=self.train_size,
            val_size=self.val_size,
            min_visible=self.min_visible,
            max_attempts=self.max_attempts,
            seed=self.seed,
        )

    def net_config(self) -> ClassNetConfig:
        return ClassNetConfig(
            image_size=self.image_size,
            block_channels=self.block_channels,
            block_strides=self.block_strides,
            kernel_size=self.kernel_size,
            num_classes=self.num_classes,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            alpha=self.alpha,
            mixup=self.mixup,
            flip_prob=self.flip_prob,
            crop_range=self.crop_range,
            scale_range=self.scale_range,
            jitter=self.jitter,
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_ent=self.lambda_ent, lambda_con=self.lambda_con)

    def pseudo_label_config(self) -> PseudoLabelConfig:
        return PseudoLabelConfig(tau_bg=self.tau_bg, upsample=self.upsample)

    def with_overrides(self, **updates) -> "RunConfig":
        values = self.model_dump()
        values.update(updates)
        return build_config(values)


class ServeSettings(BaseSettings):
    """Settings for the HTTP inference app."""

    model_config = SettingsConfigDict(env_prefix="MIXCAM_", extra="ignore")

    checkpoint: Optional[str] = Field(None, description="MXCM checkpoint to serve")
    data: Optional[str] = Field(None, description="Directory holding train.mxds / val.mxds")
    run_config: Optional[str] = Field(None, description="Resolved config of the run that produced the checkpoint")


def first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    where = ".".join(str(p) for p in first.get("loc", ())) or "config"
    return f"{where}: {first.get('msg', 'invalid value')}"


# ==================== FILE FORMAT ====================

def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse flat `key = value` lines; `#` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key.replace("-", "_")] = value
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    logger.debug(f"Read config file {path}")
    return parse_config_text(text, str(path))


def build_config(values: Mapping[str, object]) -> RunConfig:
    try:
        return RunConfig(**dict(values))
    except ValidationError as e:
        raise ConfigError(first_error(e))


def resolve_config(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> RunConfig:
    """Defaults < environment < config file < flag overrides."""
    values: Dict[str, object] = {}
    if config_path:
        values.update(load_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_config(values)


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: RunConfig) -> str:
    lines = ["# resolved run configuration"]
    for key, value in config.model_dump().items():
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def write_resolved_config(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_CONFIG_NAME
    path.write_text(dump_config(config), encoding="utf-8")
    return path


def run_config_for_checkpoint(checkpoint: Union[str, Path]) -> Optional[Path]:
    """The resolved config of the run that wrote `<run>/checkpoints/epoch_NNN.mxcm`, if present."""
    candidate = Path(checkpoint).parent.parent / RESOLVED_CONFIG_NAME
    return candidate if candidate.exists() else None
