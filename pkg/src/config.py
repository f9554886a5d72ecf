"""Configuration management for voxel-fm."""

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.adapt import FewShotPlan, FinetuneConfig, HeadSpec, SweepGrid
from src.encoder import EncoderConfig
from src.preprocess import CropConfig, WindowSpec, windows_from_preset
from src.ssl_dino import DinoConfig
from src.ssl_mae import MaeConfig
from src.utils.constants import (
    DEFAULT_LOG_LEVEL,
    DEFAULT_N_BOOT,
    DEFAULT_N_PERM,
    DEFAULT_PROFILE,
    DEFAULT_SEED,
    GALLERY_MODES,
    INTERPOLATION_ORDERS,
    LOG_LEVELS,
    PROFILES,
    RESIZE_METHODS,
    RETRIEVAL_KS,
    THREADS_ENV_VAR,
)
from src.utils.errors import ConfigurationError, PreprocessError
from src.volume_store import PhantomSpec


class EvalConfig(BaseModel):
    """Resampling budgets and retrieval settings for the evaluation verbs."""

    model_config = ConfigDict(extra="forbid")

    metric: str = "auc"
    n_boot: int = Field(default=DEFAULT_N_BOOT, ge=1)
    n_perm: int = Field(default=DEFAULT_N_PERM, ge=1)
    retrieval_ks: Tuple[int, ...] = RETRIEVAL_KS
    gallery: str = "all"

    @field_validator("metric")
    @classmethod
    def validate_metric(cls, v: str) -> str:
        """Validate metric name is supported."""
        if v not in ("auc", "ap"):
            raise ValueError(f"Invalid metric: {v}. Must be one of ['ap', 'auc']")
        return v

    @field_validator("gallery")
    @classmethod
    def validate_gallery(cls, v: str) -> str:
        """Validate gallery mode is supported."""
        if v not in GALLERY_MODES:
            raise ValueError(f"Invalid gallery: {v}. Must be one of {sorted(GALLERY_MODES)}")
        return v


class RunConfig(BaseModel):
    """
    Effective configuration of one CLI run.

    Built from profile defaults with user YAML deep-merged on top.
    Unknown keys are rejected at every nesting level.
    """

    model_config = ConfigDict(extra="forbid")

    profile: str = DEFAULT_PROFILE
    seed: int = Field(default=DEFAULT_SEED, ge=0)
    deterministic: bool = True
    log_level: str = DEFAULT_LOG_LEVEL
    manifest: Optional[Path] = None
    output_dir: Path = Path("runs")

    windows: List[WindowSpec] = Field(default_factory=lambda: windows_from_preset("ct3"))
    resample_method: str = "tricubic"
    resize_method: str = "trilinear"

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    crop: CropConfig = Field(default_factory=CropConfig)
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    dino: DinoConfig = Field(default_factory=DinoConfig)
    mae: MaeConfig = Field(default_factory=MaeConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    head: HeadSpec = Field(default_factory=HeadSpec)
    few_shot: FewShotPlan = Field(default_factory=FewShotPlan)
    sweep: SweepGrid = Field(default_factory=SweepGrid)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    @field_validator("profile")
    @classmethod
    def validate_profile(cls, v: str) -> str:
        """Validate profile is supported."""
        if v not in PROFILES:
            raise ValueError(f"Invalid profile: {v}. Must be one of {sorted(PROFILES)}")
        return v

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level is supported."""
        if v not in LOG_LEVELS:
            raise ValueError(f"Invalid log level: {v}. Must be one of {sorted(LOG_LEVELS)}")
        return v

    @field_validator("windows", mode="before")
    @classmethod
    def expand_preset(cls, v: Any) -> Any:
        """Accept a preset name in place of a window list."""
        if isinstance(v, str):
            try:
                return [w.model_dump() for w in windows_from_preset(v)]
            except PreprocessError as e:
                raise ValueError(str(e))
        return v

    @field_validator("resample_method")
    @classmethod
    def validate_resample(cls, v: str) -> str:
        """Validate resampling interpolation is supported."""
        if v not in INTERPOLATION_ORDERS:
            raise ValueError(f"Invalid resample_method: {v}. Must be one of {sorted(INTERPOLATION_ORDERS)}")
        return v

    @field_validator("resize_method")
    @classmethod
    def validate_resize(cls, v: str) -> str:
        """Validate resize interpolation is supported."""
        if v not in RESIZE_METHODS:
            raise ValueError(f"Invalid resize_method: {v}. Must be one of {sorted(RESIZE_METHODS)}")
        return v

    @model_validator(mode="after")
    def validate_consistency(self) -> "RunConfig":
        """Validate the encoder matches the channel count and model input."""
        if not self.windows:
            raise ValueError("windows must declare at least one channel")
        if self.encoder.channels != len(self.windows):
            raise ValueError(
                f"encoder.channels {self.encoder.channels} does not match {len(self.windows)} window(s)"
            )
        if tuple(self.encoder.input_dims) != tuple(self.crop.model_input):
            raise ValueError(
                f"encoder.input_dims {self.encoder.input_dims} does not match crop.model_input {self.crop.model_input}"
            )
        return self

    @classmethod
    def for_profile(cls, profile: str = DEFAULT_PROFILE, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """
        Build a config from profile defaults and optional overrides.

        Args:
            profile: desk or full
            overrides: Nested mapping deep-merged over the profile defaults

        Raises:
            ConfigurationError: On unknown keys, type mismatches or invariant violations
        """
        if profile not in PROFILES:
            raise ConfigurationError(f"Invalid profile: {profile}. Must be one of {sorted(PROFILES)}")
        data = deep_merge(profile_defaults(profile), dict(overrides or {}))
        data["profile"] = profile
        try:
            return cls(**data)
        except ValidationError as e:
            raise ConfigurationError(describe_validation_error(e))

    @classmethod
    def from_yaml(cls, config_path: Union[str, Path], profile: Optional[str] = None) -> "RunConfig":
        """
        Load configuration from a YAML file.

        The profile comes from the argument, else the file's ``profile`` key,
        else the default profile.

        Raises:
            ConfigurationError: If file not found, invalid YAML or invalid values
        """
        config_file = Path(config_path)
        if not config_file.exists():
            raise ConfigurationError(f"Config file not found: {config_path}")

        try:
            with open(config_file, "r") as f:
                config_data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in config file: {e}")
        if not isinstance(config_data, dict):
            raise ConfigurationError(f"Config file must hold a mapping, got {type(config_data).__name__}")

        chosen = profile or config_data.get("profile") or DEFAULT_PROFILE
        return cls.for_profile(chosen, config_data)

    def to_dict(self) -> Dict[str, Any]:
        """Return the JSON-compatible form of the effective configuration."""
        return self.model_dump(mode="json")

    def to_yaml(self, output_path: Union[str, Path]) -> None:
        """
        Save configuration to a YAML file.

        Raises:
            ConfigurationError: If write operation fails
        """
        try:
            output_file = Path(output_path)
            output_file.parent.mkdir(parents=True, exist_ok=True)
            with open(output_file, "w") as f:
                yaml.safe_dump(self.to_dict(), f, default_flow_style=False, sort_keys=True)
        except OSError as e:
            raise ConfigurationError(f"Error saving config: {e}")

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of the effective configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_config(path: Union[str, Path], profile: Optional[str] = None) -> RunConfig:
    return RunConfig.from_yaml(path, profile)


def profile_defaults(profile: str) -> Dict[str, Any]:
    """Nested default blocks for a profile."""
    if profile == "desk":
        blocks = {
            "encoder": EncoderConfig.desk(),
            "crop": CropConfig.desk(),
            "dino": DinoConfig.desk(),
            "mae": MaeConfig.desk(),
            "finetune": FinetuneConfig.desk(),
            "few_shot": FewShotPlan.desk(),
            "sweep": SweepGrid.desk(),
        }
        return {name: block.model_dump(mode="json") for name, block in blocks.items()}
    # full profile scans are resampled into a 224 mm field of view
    return {"phantom": {"dims": [224, 224, 224], "blob_radius_range": [6, 20]}}


def deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursively merge ``override`` into a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def describe_validation_error(error: ValidationError) -> str:
    """One line per pydantic error, naming the dotted key path."""
    lines = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"]) or "<root>"
        if item["type"] == "extra_forbidden":
            lines.append(f"unknown key '{key}'")
        else:
            lines.append(f"invalid value for '{key}': {item['msg']}")
    return "Invalid configuration: " + "; ".join(lines)


def threads_from_env() -> Optional[int]:
    """
    Read the torch thread count from the environment (``.env`` included).

    Raises:
        ConfigurationError: If the variable is set but not a positive integer
    """
    load_dotenv()
    raw = os.getenv(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV_VAR} must be an integer, got '{raw}'")
    if threads <= 0:
        raise ConfigurationError(f"{THREADS_ENV_VAR} must be positive, got {threads}")
    return threads
