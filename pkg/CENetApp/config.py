"""
Run configuration: a JSON document with model / train / data / output
sections, parsed strictly (unknown keys are errors).
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from django.conf import settings
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


VARIANT_DEFAULTS = {
    "unet": {"enable_dac": False, "enable_rmp": False},
    "backbone": {"enable_dac": False, "enable_rmp": False},
    "cenet": {"enable_dac": True, "enable_rmp": True},
}


class ModelConfig(StrictModel):
    variant: Literal["unet", "backbone", "cenet"] = "cenet"
    num_classes: int = Field(1, ge=1)
    width_multiplier: float = Field(1.0, gt=0.0, le=1.0)
    enable_dac: bool = True
    enable_rmp: bool = True
    # false: every DAC conv uses rate 1 (the "DAC without atrous" ablation)
    dac_atrous: bool = True
    input_channels: int = Field(3, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _variant_flags(cls, data: Any) -> Any:
        if isinstance(data, dict):
            variant = data.get("variant", "cenet")
            defaults = VARIANT_DEFAULTS.get(variant, {})
            data = {**defaults, **data}
        return data

    @model_validator(mode="after")
    def _unet_has_no_context(self) -> "ModelConfig":
        if self.variant == "unet" and (self.enable_dac or self.enable_rmp):
            raise ValueError("the unet variant has no context extractor; enable_dac/enable_rmp must be false")
        return self

    def channels(self, base: int) -> int:
        """Scale a reference channel count by the width multiplier."""
        c = int(base * self.width_multiplier + 1e-9)
        if c < 1:
            raise ConfigurationError(
                f"width_multiplier {self.width_multiplier} turns {base} channels into {c}"
            )
        return c

    @property
    def label(self) -> str:
        if self.variant == "unet":
            return "unet"
        if self.enable_dac and self.enable_rmp:
            return "cenet" if self.dac_atrous else "backbone+dac-noatrous+rmp"
        if self.enable_dac:
            return "backbone+dac" if self.dac_atrous else "backbone+dac-noatrous"
        if self.enable_rmp:
            return "backbone+rmp"
        return "backbone"


NAMED_CONFIGURATIONS: Dict[str, Dict[str, Any]] = {
    "unet": {"variant": "unet"},
    "backbone": {"variant": "backbone"},
    "backbone+dac": {"variant": "backbone", "enable_dac": True},
    "backbone+dac-noatrous": {"variant": "backbone", "enable_dac": True, "dac_atrous": False},
    "backbone+rmp": {"variant": "backbone", "enable_rmp": True},
    "cenet": {"variant": "cenet"},
}


def named_model_config(name: str, **overrides) -> ModelConfig:
    """Build one of the ablation configurations by name."""
    if name not in NAMED_CONFIGURATIONS:
        raise ConfigurationError(f"unknown configuration {name!r}; choose from {sorted(NAMED_CONFIGURATIONS)}")
    return ModelConfig(**{**NAMED_CONFIGURATIONS[name], **overrides})


class TrainConfig(StrictModel):
    base_lr: float = Field(4e-3, ge=0.0)
    momentum: float = Field(0.9, ge=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(8, ge=1)
    max_epochs: int = Field(100, ge=1)
    poly_power: float = Field(0.9, ge=0.0)
    seed: int = 0
    loss: Literal["dice", "ce"] = "dice"
    # overrides max_epochs * iterations per epoch as the schedule length
    max_iters: Optional[int] = Field(None, ge=1)
    augment: bool = True


class AugmentConfig(StrictModel):
    scale_range: Tuple[float, float] = (0.90, 1.10)
    hue_delta: float = Field(0.02, ge=0.0)
    sat_delta: float = Field(0.10, ge=0.0)
    val_delta: float = Field(0.10, ge=0.0)
    shift_fraction: float = Field(0.10, ge=0.0, lt=1.0)
    seed: int = 0

    @field_validator("scale_range")
    @classmethod
    def _ordered(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not 0 < v[0] <= v[1]:
            raise ValueError(f"scale_range must satisfy 0 < low <= high, got {v}")
        return v


class DataConfig(StrictModel):
    root: str = ""
    eval_root: Optional[str] = None
    ignore_label: int = Field(255, ge=0, le=255)
    augment: AugmentConfig = AugmentConfig()


class OutputConfig(StrictModel):
    dir: str = ""

    def resolved(self) -> Path:
        return Path(self.dir or settings.CENET_OUTPUT_DIR)


class RunConfig(StrictModel):
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    output: OutputConfig = OutputConfig()

    def effective_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """
    Parse a run-config JSON file. Any problem (missing file, bad JSON,
    unknown key, out-of-range value) becomes a ConfigurationError.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        return RunConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigurationError(f"invalid config {path}: {e}") from e


def write_effective_config(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir) / "effective-config.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(cfg.effective_json() + "\n", encoding="utf-8")
    return out
