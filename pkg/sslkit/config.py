"""Configuration management for sslkit.

Two layers live here: process settings read from ``SSLKIT_*`` environment
variables, and the validated run configuration (``TrainConfig`` and the
models nested inside it) together with the named presets.
"""

import copy
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from .exceptions import ConfigError


class Settings(BaseSettings):
    """Process-level settings for sslkit."""

    # Parallelism
    threads: int = Field(
        default=4, description="Worker cap for batch preparation", gt=0
    )

    # Logging settings
    log_level: str = Field(default="INFO", description="Logging level")

    log_format: str = Field(
        default="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        description="Log format string",
    )

    # Frozen-feature cache
    feature_cache_size: int = Field(
        default=32, description="Maximum number of cached feature matrices", gt=0
    )

    checkpoint_format_version: str = Field(
        default="1.0", description="Version written into new checkpoint files"
    )

    model_config = {
        "env_prefix": "SSLKIT_",
        "env_file": ".env",
        "case_sensitive": False,
        "extra": "ignore",
    }


# Global settings instance
settings = Settings()


class EncoderConfig(BaseModel):
    """Architecture of the feature extractor f(.; theta)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    architecture: str = Field(default="reference", description="Registered encoder architecture")
    input_height: int = Field(default=32, gt=0)
    input_width: int = Field(default=32, gt=0)
    channels: Tuple[int, int] = Field(default=(8, 16), description="Output channels of the two convolutions")
    d_emb: int = Field(default=64, gt=0, description="Latent dimension")
    use_bias: bool = True
    init: Literal["xavier_uniform", "zeros"] = "xavier_uniform"

    @field_validator("channels")
    @classmethod
    def positive_channels(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if any(c <= 0 for c in v):
            raise ValueError("channel counts must be positive")
        return v


ENCODER_PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {"input_height": 32, "input_width": 32, "channels": (8, 16), "d_emb": 64},
    # d_emb 2048 of the full-scale protocol
    "full": {"input_height": 32, "input_width": 32, "channels": (32, 64), "d_emb": 2048},
}


class AugmentConfig(BaseModel):
    """Parameters of the probabilistic transformation T."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    flip_prob_h: float = Field(default=0.5, ge=0.0, le=1.0)
    flip_prob_v: float = Field(default=0.5, ge=0.0, le=1.0)
    hue_delta: float = Field(default=0.05, ge=0.0, le=0.5, description="Hue shift bound, hue in [0, 1)")
    sat_range: Tuple[float, float] = (0.8, 1.2)
    val_range: Tuple[float, float] = (0.8, 1.2)
    standardize_mean: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    standardize_std: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("sat_range", "val_range")
    @classmethod
    def range_contains_one(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        low, high = v
        if low <= 0 or high < low or not (low <= 1.0 <= high):
            raise ValueError("range must be a positive interval containing 1")
        return v

    @field_validator("standardize_std")
    @classmethod
    def positive_std(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(s <= 0 for s in v):
            raise ValueError("standardization std must be positive")
        return v

    @property
    def is_jitter_free(self) -> bool:
        return (
            self.hue_delta == 0.0
            and self.sat_range == (1.0, 1.0)
            and self.val_range == (1.0, 1.0)
        )

    def without_randomness(self) -> "AugmentConfig":
        """Standardization only, as used at evaluation time."""
        return self.model_copy(
            update={
                "flip_prob_h": 0.0,
                "flip_prob_v": 0.0,
                "hue_delta": 0.0,
                "sat_range": (1.0, 1.0),
                "val_range": (1.0, 1.0),
            }
        )


class ProbeConfig(BaseModel):
    """Linear-probe optimisation on frozen features."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(default=30, gt=0)
    batch_size: int = Field(default=64, gt=0)
    learning_rate: float = Field(default=0.1, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    balanced_sampling: bool = True
    standardize_features: bool = True
    seed: int = 0


Regime = Literal["supervised", "swav", "supcon"]
REGIMES: Tuple[str, ...] = ("supervised", "swav", "supcon")


class TrainConfig(BaseModel):
    """Complete description of one training run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    regime: Regime = "supervised"
    epochs: int = Field(default=20, gt=0)
    batch_size: int = Field(default=256, gt=0)
    learning_rate: float = Field(default=0.05, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    n_views: int = Field(default=2, gt=0, description="Views per image (M)")
    supcon_temperature: float = Field(default=0.2, gt=0.0, description="tau")
    code_temperature: float = Field(default=0.1, gt=0.0, description="Softmax temperature of SwAV codes")
    sinkhorn_epsilon: float = Field(default=0.03, gt=0.0)
    sinkhorn_iterations: int = Field(default=3, gt=0)
    n_prototypes: int = Field(default=1000, gt=0, description="K = |Omega|")
    d_proj: int = Field(default=128, gt=0)
    queue_capacity: int = Field(default=1280, gt=0)
    queue_start_epoch: int = Field(default=15, gt=0)
    prototype_freeze_epochs: int = Field(default=2, ge=0)
    samples_per_class: Optional[int] = Field(default=None, gt=0, description="N_c; median support when unset")
    balanced_sampling: bool = True
    class_weighting: Literal["inverse_frequency", "uniform"] = "inverse_frequency"
    mixup_enabled: bool = False
    mixup_alpha: float = Field(default=0.2, gt=0.0)
    mixup_fixed_lambda: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    standardize_from_data: bool = True
    seed: int = 0
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)

    @model_validator(mode="after")
    def views_for_contrastive(self) -> "TrainConfig":
        if self.regime in ("swav", "supcon") and self.n_views < 2:
            raise ValueError(
                f"n_views must be >= 2 for the {self.regime} regime")
        return self


PRESETS: Dict[str, Dict[str, Any]] = {
    "paper-short": {"regime": "supervised", "epochs": 20},
    "paper-long": {"regime": "supervised", "epochs": 100},
    "paper-long-mixup": {"regime": "supervised", "epochs": 100, "mixup_enabled": True},
    "paper-swav": {
        "regime": "swav",
        "epochs": 200,
        "batch_size": 256,
        "n_views": 2,
        "n_prototypes": 1000,
        "d_proj": 128,
        "sinkhorn_epsilon": 0.03,
        "sinkhorn_iterations": 3,
        "queue_capacity": 1280,
        "queue_start_epoch": 15,
        "prototype_freeze_epochs": 2,
        "encoder": ENCODER_PRESETS["full"],
    },
    "paper-supcon": {
        "regime": "supcon",
        "batch_size": 256,
        "n_views": 2,
        "supcon_temperature": 0.2,
        "d_proj": 128,
        "encoder": ENCODER_PRESETS["full"],
    },
    "desk-supervised": {
        "regime": "supervised",
        "epochs": 20,
        "batch_size": 64,
        "class_weighting": "uniform",
    },
    "desk-swav": {
        "regime": "swav",
        "epochs": 50,
        "batch_size": 64,
        "n_prototypes": 64,
        "d_proj": 32,
        "queue_capacity": 256,
        "queue_start_epoch": 15,
        "prototype_freeze_epochs": 2,
    },
    "desk-supcon": {
        "regime": "supcon",
        "epochs": 30,
        "batch_size": 64,
        "d_proj": 32,
        "supcon_temperature": 0.2,
    },
}


# Older names of the full-scale presets.
PRESET_ALIASES: Dict[str, str] = {
    f"full-{suffix}": f"paper-{suffix}"
    for suffix in ("short", "long", "long-mixup", "swav", "supcon")
}
PRESET_NAMES: List[str] = sorted([*PRESETS, *PRESET_ALIASES])


def canonical_preset(name: str) -> str:
    """Canonical preset name for ``name`` or one of its aliases."""
    canonical = PRESET_ALIASES.get(name, name)
    if canonical not in PRESETS:
        raise ConfigError("preset", name, f"must be one of {', '.join(sorted(PRESETS))}")
    return canonical


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _set_dotted(target: Dict[str, Any], dotted: str, value: Any) -> None:
    node = target
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, value, f"'{part}' is not a nested section")
    node[parts[-1]] = value


def config_error_from_validation(exc: ValidationError) -> ConfigError:
    """Turn the first pydantic validation error into a ``ConfigError``."""
    first = exc.errors()[0]
    field = ".".join(str(p) for p in first["loc"]) or "config"
    value = first.get("input", "")
    if isinstance(value, dict):
        value = "{...}"
    return ConfigError(field, value, first["msg"])


def resolve_train_config(
    preset: Optional[str] = None,
    file_fields: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> TrainConfig:
    """Build a ``TrainConfig`` with precedence override > file field > preset > default.

    A ``preset`` key inside ``file_fields`` is honoured when no explicit
    preset is passed. Override keys may be dotted (``encoder.d_emb``).
    """
    fields = dict(file_fields or {})
    preset = preset or fields.pop("preset", None)
    fields.pop("preset", None)

    resolved: Dict[str, Any] = {}
    if preset is not None:
        resolved = _merge(resolved, PRESETS[canonical_preset(preset)])

    resolved = _merge(resolved, fields)
    for key, value in (overrides or {}).items():
        _set_dotted(resolved, key, value)

    try:
        return TrainConfig.model_validate(resolved)
    except ValidationError as exc:
        raise config_error_from_validation(exc) from exc


def describe_fields() -> List[str]:
    """One help line per ``TrainConfig`` field with its full-scale preset value, if any."""
    full_scale: Dict[str, Any] = {}
    for name in ("paper-short", "paper-swav", "paper-supcon"):
        for key, value in PRESETS[name].items():
            if key not in ("regime", "epochs", "encoder"):
                full_scale.setdefault(key, value)
    full_scale["epochs"] = "20 / 100 / 200"
    full_scale["encoder.d_emb"] = ENCODER_PRESETS["full"]["d_emb"]

    lines = []
    for name, info in TrainConfig.model_fields.items():
        if isinstance(info.default, BaseModel) or info.default_factory is not None:
            sub_model = info.annotation
            for sub_name, sub_info in sub_model.model_fields.items():  # type: ignore[union-attr]
                dotted = f"{name}.{sub_name}"
                line = f"  {dotted} (default: {sub_info.default})"
                if dotted in full_scale:
                    line += f" [full-scale: {full_scale[dotted]}]"
                lines.append(line)
            continue
        line = f"  {name} (default: {info.default})"
        if name in full_scale:
            line += f" [full-scale: {full_scale[name]}]"
        lines.append(line)
    return lines
