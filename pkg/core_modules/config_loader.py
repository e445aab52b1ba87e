"""
Configuration Loader Module

This module provides the ConfigLoader class for loading and merging YAML
configuration files, and the pydantic settings models the simulator is run
with.

Layering, lowest to highest precedence:
    configs/global_settings.yaml -> user YAML (--config) -> environment -> CLI flags
"""

import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from core_modules.errors import ConfigError
from core_modules.grid import DEFAULT_ROW_MAP, GridGeometry
from core_modules.modulator import SchedulerConfig
from core_modules.psychophysics import SigmoidModel, load_model
from core_modules.transport import LinkModel

logger = logging.getLogger("core.config_loader")

PROJECT_ROOT = Path(__file__).resolve().parent.parent
UNRESOLVED_VAR = re.compile(r"\$\{[^}]+\}|\$[A-Za-z_][A-Za-z0-9_]*")


# --- settings models ---

class LoggingSettings(BaseModel):
    level: str = "INFO"


class PathSettings(BaseModel):
    out_dir: Optional[str] = None
    recordings_dir: Optional[str] = None


class RunSettings(BaseModel):
    mode: Literal["simulated-time", "wall-clock"] = "simulated-time"
    seed: Optional[int] = Field(default=None, ge=0, lt=2 ** 64)
    window_ticks: int = Field(default=2400, ge=1)


class GeometrySpec(BaseModel):
    width: int = Field(ge=1, le=255)
    height: int = Field(ge=1, le=255)
    pitch_mm: float = Field(default=2.0, gt=0)

    def build(self) -> GridGeometry:
        return GridGeometry(width=self.width, height=self.height, pitch_mm=self.pitch_mm)


class GeometrySettings(BaseModel):
    sensor: GeometrySpec = GeometrySpec(width=5, height=10)
    electrode: GeometrySpec = GeometrySpec(width=4, height=5)
    row_map: List[int] = list(DEFAULT_ROW_MAP)


class ModelSettings(BaseModel):
    """Transfer-function coefficients, or a fitted model file that overrides them."""

    a: float = 3.0
    b: float = Field(default=6.0, gt=0)
    k: float = Field(default=150.0, gt=0)
    path: Optional[str] = None

    def build(self) -> SigmoidModel:
        if self.path:
            return load_model(self.path)
        return SigmoidModel(a=self.a, b=self.b, k=self.k)


class MappingSettings(BaseModel):
    max_count: int = Field(default=65535, gt=0, le=65535)
    deadzone_fraction: float = Field(default=0.02, ge=0.0, lt=1.0)
    ceiling_fraction: float = Field(default=0.95, gt=0.0, lt=1.0)


class PatternSettings(BaseModel):
    bar_amplitude: int = Field(default=40000, ge=0, le=65535)
    bar_thickness_sensels: float = Field(default=1.5, gt=0)
    bar_ticks: int = Field(default=2400, ge=1)
    scroll_amplitude: int = Field(default=3150, ge=0, le=65535)
    scroll_band_thickness_sensels: float = Field(default=3.0, gt=0)
    frames_per_cycle: int = Field(default=720, ge=8)
    cycles: int = Field(default=10, ge=1)


class CalibrationSettings(BaseModel):
    levels: List[float] = [0.1, 0.2, 0.4, 0.6, 0.8, 1.0]
    trials_per_level: int = Field(default=5, ge=1)
    participants: int = Field(default=1, ge=1)
    noise_sigma: float = Field(default=0.0, ge=0.0)


class AnalysisSettings(BaseModel):
    map_window_ticks: int = Field(default=6, ge=1)
    peak_threshold_factor: float = Field(default=1.25, gt=0)
    static_trials_per_class: int = Field(default=7, ge=1)
    dynamic_trials: int = Field(default=20, ge=1)


class Settings(BaseModel):
    """Effective simulator settings after all layers are merged."""

    version: str = "1.0.0"
    logging: LoggingSettings = LoggingSettings()
    paths: PathSettings = PathSettings()
    run: RunSettings = RunSettings()
    scheduler: SchedulerConfig = SchedulerConfig()
    geometry: GeometrySettings = GeometrySettings()
    model: ModelSettings = ModelSettings()
    mapping: MappingSettings = MappingSettings()
    link: LinkModel = LinkModel()
    patterns: PatternSettings = PatternSettings()
    calibration: CalibrationSettings = CalibrationSettings()
    analysis: AnalysisSettings = AnalysisSettings()


class RunConfig(BaseModel):
    """Everything a pipeline or experiment run needs; the seed is mandatory in simulated time."""

    mode: Literal["simulated-time", "wall-clock"] = "simulated-time"
    seed: Optional[int] = Field(default=None, ge=0, lt=2 ** 64)
    link: LinkModel = LinkModel()
    model: ModelSettings = ModelSettings()
    window_ticks: int = Field(default=2400, ge=1)
    recording: Optional[str] = None
    out_dir: Optional[str] = None

    @model_validator(mode="after")
    def _seed_required(self) -> "RunConfig":
        if self.mode == "simulated-time" and self.seed is None:
            raise ValueError("a seed is required in simulated-time mode")
        return self

    @classmethod
    def from_settings(cls, settings: Settings, **overrides: Any) -> "RunConfig":
        """
        Build a RunConfig from merged settings plus explicit overrides.

        Raises:
            ConfigError: If the result fails validation.
        """
        values = {
            "mode": settings.run.mode,
            "seed": settings.run.seed,
            "link": settings.link,
            "model": settings.model,
            "window_ticks": settings.run.window_ticks,
            "out_dir": settings.paths.out_dir,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigError(_describe(e))


def _describe(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in item['loc'])}: {item['msg']}" for item in error.errors()
    )


# --- loader ---

class ConfigLoader:
    """
    Loads and merges YAML configuration files for the simulator.

    Handles:
    - Global defaults (configs/global_settings.yaml)
    - An optional user file layered on top
    - Environment variable expansion for values like ${VAR_NAME}; a variable
      that is not set leaves the value empty
    - Converting relative entries of the 'paths' section to absolute paths
    - Caching loaded files
    - Saving configurations back to files
    """

    def __init__(self, root: Union[str, Path, None] = None):
        """
        Initialize a new ConfigLoader instance.

        Args:
            root: Directory holding configs/; defaults to the repository root.
        """
        self.root = Path(os.path.expanduser(str(root or PROJECT_ROOT))).resolve()
        self.configs_dir = self.root / "configs"
        self.config_cache: Dict[str, Dict[str, Any]] = {}
        logger.debug(f"Config Loader initialized with root: {self.root}")

    def _expand_env_vars(self, value: Any) -> Any:
        """Recursively expand environment variables in string values."""
        if isinstance(value, str):
            expanded = os.path.expandvars(value)
            if UNRESOLVED_VAR.search(expanded):
                return None
            return expanded
        elif isinstance(value, dict):
            return {k: self._expand_env_vars(v) for k, v in value.items()}
        elif isinstance(value, list):
            return [self._expand_env_vars(item) for item in value]
        return value

    def _absolutize_paths(self, config: Dict[str, Any], raw: Dict[str, Any]) -> Dict[str, Any]:
        """
        Convert relative paths in the 'paths' section to absolute paths.

        Entries written in the file resolve against the root; entries that came
        from an environment variable resolve against the working directory.
        """
        paths_section = config.get("paths")
        if not isinstance(paths_section, dict):
            return config
        raw_paths = raw.get("paths") if isinstance(raw.get("paths"), dict) else {}

        result = config.copy()
        result["paths"] = paths_section.copy()
        for key, path in result["paths"].items():
            if isinstance(path, str) and path and not os.path.isabs(path):
                from_env = "$" in str(raw_paths.get(key, ""))
                base = Path.cwd() if from_env else self.root
                result["paths"][key] = str(base / path)
        return result

    def _load_yaml_file(self, file_path: Path, required: bool = False) -> Dict[str, Any]:
        """
        Load a single YAML file as a raw mapping; variables are expanded later.

        Raises:
            ConfigError: If a required file is missing, or any file fails to parse.
        """
        if not file_path.is_file():
            if required:
                raise ConfigError(f"Configuration file not found: {file_path}")
            logger.warning(f"Configuration file not found: {file_path}")
            return {}

        try:
            with open(file_path, "r", encoding="utf-8") as f:
                config_data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Error parsing YAML file {file_path}: {e}")
        if not isinstance(config_data, dict):
            raise ConfigError(f"Top level of {file_path} must be a mapping")
        return config_data

    def _get_config(self, config_key: str, file_path: Path, required: bool = False) -> Dict[str, Any]:
        if config_key in self.config_cache:
            return self.config_cache[config_key]
        raw = self._load_yaml_file(file_path, required)
        config_data = self._absolutize_paths(self._expand_env_vars(raw), raw)
        self.config_cache[config_key] = config_data
        return config_data

    def load_global_config(self) -> Dict[str, Any]:
        """Load configs/global_settings.yaml with path absolutization."""
        return self._get_config("global_config", self.configs_dir / "global_settings.yaml")

    def load_user_config(self, path: Union[str, Path]) -> Dict[str, Any]:
        """Load a user-supplied YAML file; it must exist."""
        file_path = Path(path).expanduser().resolve()
        return self._get_config(f"user_config_{file_path}", file_path, required=True)

    def merge_configs(self, base_config: Dict[str, Any], override_config: Dict[str, Any]) -> Dict[str, Any]:
        """
        Recursively merge two configurations, with override_config taking precedence.

        Returns:
            A new dictionary representing the merged configuration
        """
        merged = base_config.copy()
        for key, value in override_config.items():
            if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
                merged[key] = self.merge_configs(merged[key], value)
            else:
                merged[key] = value
        return merged

    def get_effective_config(self, user_path: Optional[Union[str, Path]] = None,
                             overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Merge global defaults, an optional user file, the environment and overrides.

        ``ELECTROAR_OUT`` is already picked up through ``${ELECTROAR_OUT}`` in
        the global file; a user file may still override it.
        """
        effective = self.load_global_config()
        if user_path:
            effective = self.merge_configs(effective, self.load_user_config(user_path))
        if overrides:
            effective = self.merge_configs(effective, overrides)
        return effective

    def save_config(self, config_data: Dict[str, Any], path: Union[str, Path]) -> None:
        """
        Write a configuration mapping as YAML.

        Raises:
            ConfigError: If the file cannot be written.
        """
        config_path = Path(path)
        try:
            config_path.parent.mkdir(parents=True, exist_ok=True)
            with open(config_path, "w", encoding="utf-8") as f:
                yaml.safe_dump(config_data, f, default_flow_style=False, sort_keys=False)
        except OSError as e:
            raise ConfigError(f"Failed to save configuration to {config_path}: {e}")
        logger.info(f"Saved configuration to {config_path}")


def load_settings(user_path: Optional[Union[str, Path]] = None,
                  overrides: Optional[Dict[str, Any]] = None,
                  loader: Optional[ConfigLoader] = None) -> Settings:
    """
    Load and validate the effective settings.

    Raises:
        ConfigError: If a file fails to load or the merged values fail validation.
    """
    loader = loader or ConfigLoader()
    raw = loader.get_effective_config(user_path, overrides)
    try:
        settings = Settings.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_describe(e))
    logger.debug(f"Settings loaded (version {settings.version})")
    return settings


def dump_settings(settings: Settings) -> str:
    """The settings as YAML text."""
    return yaml.safe_dump(settings.model_dump(mode="json"), default_flow_style=False, sort_keys=False)
