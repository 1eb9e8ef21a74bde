"""
Configuration loader for fedseg.

Supports loading configuration from:
1. A JSON config file with sections fed, unet, pipeline, phantom, experiment
2. Environment variables (FEDSEG_SEED, FEDSEG_ROUNDS, FEDSEG_CLIENTS,
   FEDSEG_LEARNING_RATE, FEDSEG_EVAL_EVERY_ROUND)

Values missing from both fall back to the dataclass defaults.
"""

from dataclasses import fields, replace
import json
import logging
import os
from typing import Any, Optional

from fedseg.errors import ConfigError
from fedseg.models import (
    AppConfig, CoordinateMode, ExperimentSettings, FedConfig, PhantomConfig,
    PipelineConfig, PolarGrid, PostProcess, UNetConfig,
)

logger = logging.getLogger(__name__)

SECTIONS = {
    'fed': FedConfig,
    'unet': UNetConfig,
    'pipeline': PipelineConfig,
    'phantom': PhantomConfig,
    'experiment': ExperimentSettings,
}


class ConfigLoader:
    """Load configuration from a JSON file and the environment."""

    def __init__(self, config_file: Optional[str] = "fedseg.json"):
        """
        Initialize config loader.

        Args:
            config_file: Path to config file (None means environment only)
        """
        self.config_file = config_file
        self.config: Optional[dict] = None

    def load_from_file(self) -> bool:
        """
        Load configuration from the JSON file.

        Returns:
            True if file was loaded successfully, False if it does not exist

        Raises:
            ConfigError: File exists but is not a JSON object with known sections
        """
        if not self.config_file or not os.path.exists(self.config_file):
            return False

        try:
            with open(self.config_file, encoding='utf-8') as handle:
                data = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid config file {self.config_file}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Invalid config file {self.config_file}: top level must be an object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Invalid config file {self.config_file}: unknown sections {unknown}")
        self.config = data
        logger.debug("Loaded config from %s", self.config_file)
        return True

    @staticmethod
    def _parse_bool(value: Optional[str], default: bool = False) -> bool:
        """
        Parse a boolean-like string value.

        Accepts common truthy/falsey strings and falls back to default for
        unknown values.
        """
        if value is None:
            return default
        if isinstance(value, bool):
            return value

        normalized = str(value).strip().lower()
        if normalized in {'1', 'true', 'yes', 'y', 'on'}:
            return True
        if normalized in {'0', 'false', 'no', 'n', 'off', ''}:
            return False
        return default

    def _section(self, name: str) -> dict:
        section = (self.config or {}).get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"Invalid config file: section '{name}' must be an object")
        allowed = {f.name for f in fields(SECTIONS[name])}
        unknown = sorted(set(section) - allowed)
        if unknown:
            raise ConfigError(f"Invalid config file: unknown keys {unknown} in section '{name}'")
        return dict(section)

    def _coerce(self, cls, values: dict[str, Any]) -> dict[str, Any]:
        defaults = cls()
        coerced = {}
        for key, value in values.items():
            default = getattr(defaults, key)
            try:
                if isinstance(default, bool):
                    coerced[key] = self._parse_bool(value, default)
                elif isinstance(default, int):
                    coerced[key] = int(value)
                elif isinstance(default, float):
                    coerced[key] = float(value)
                elif isinstance(default, tuple):
                    coerced[key] = tuple(int(v) for v in value)
                else:
                    coerced[key] = value
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Invalid value for {cls.__name__}.{key}: {value!r}") from e
        return coerced

    def _pipeline(self, phantom: PhantomConfig) -> PipelineConfig:
        values = self._section('pipeline')
        grid = values.pop('grid', None)
        try:
            mode = CoordinateMode(values.pop('coordinate_mode', CoordinateMode.CARTESIAN.value))
            post = PostProcess(values.pop('postprocess', PostProcess.NONE.value))
        except ValueError as e:
            raise ConfigError(f"Invalid pipeline setting: {e}") from e
        if isinstance(grid, dict):
            try:
                grid = PolarGrid(**grid)
            except TypeError as e:
                raise ConfigError(f"Invalid pipeline grid: {e}") from e
        elif grid is None and mode is CoordinateMode.POLAR:
            grid = PolarGrid.desk(phantom.image_size)
        config = PipelineConfig(coordinate_mode=mode, postprocess=post, grid=grid,
                                **self._coerce(PipelineConfig, values))
        config.validate()
        return config

    def _apply_env(self, fed: FedConfig, unet: UNetConfig) -> tuple[FedConfig, UNetConfig]:
        seed = os.getenv('FEDSEG_SEED')
        rounds = os.getenv('FEDSEG_ROUNDS')
        clients = os.getenv('FEDSEG_CLIENTS')
        learning_rate = os.getenv('FEDSEG_LEARNING_RATE')
        eval_every_round = os.getenv('FEDSEG_EVAL_EVERY_ROUND')
        try:
            if seed is not None:
                fed = replace(fed, seed=int(seed))
                unet = replace(unet, seed=int(seed))
            if rounds is not None:
                fed = replace(fed, rounds=int(rounds))
            if clients is not None:
                fed = replace(fed, n_clients=int(clients))
            if learning_rate is not None:
                fed = replace(fed, learning_rate=float(learning_rate))
        except ValueError as e:
            raise ConfigError(f"Invalid environment override: {e}") from e
        if eval_every_round is not None:
            fed = replace(fed, eval_every_round=self._parse_bool(eval_every_round, fed.eval_every_round))
        return fed, unet

    def get_config(self) -> AppConfig:
        """
        Build the full configuration.

        Returns:
            AppConfig with file values, environment overrides and defaults

        Raises:
            ConfigError: Unknown keys or invalid values
        """
        phantom = PhantomConfig(**self._coerce(PhantomConfig, self._section('phantom')))
        unet = UNetConfig(**self._coerce(UNetConfig, self._section('unet')))
        fed = FedConfig(**self._coerce(FedConfig, self._section('fed')))
        experiment = ExperimentSettings(**self._coerce(ExperimentSettings, self._section('experiment')))
        pipeline = self._pipeline(phantom)
        fed, unet = self._apply_env(fed, unet)

        for part in (phantom, unet, fed, experiment):
            part.validate()
        return AppConfig(fed=fed, unet=unet, pipeline=pipeline, phantom=phantom, experiment=experiment)


def load_config(config_file: Optional[str] = "fedseg.json") -> AppConfig:
    """
    Convenience function to load all configuration.

    Args:
        config_file: Path to config file

    Returns:
        AppConfig

    Raises:
        ConfigError: If configuration is invalid
    """
    loader = ConfigLoader(config_file)
    loader.load_from_file()
    return loader.get_config()


def config_to_dict(config: AppConfig) -> dict:
    """JSON-ready snapshot of ``config`` in the config file layout."""
    pipeline = config.pipeline
    return {
        'fed': {f.name: getattr(config.fed, f.name) for f in fields(FedConfig)},
        'unet': {
            **{f.name: getattr(config.unet, f.name) for f in fields(UNetConfig)},
            'input_shape': list(config.unet.input_shape),
        },
        'pipeline': {
            'coordinate_mode': pipeline.coordinate_mode.value,
            'binarize_threshold': pipeline.binarize_threshold,
            'postprocess': pipeline.postprocess.value,
            'grid': pipeline.grid.to_dict() if pipeline.grid is not None else None,
        },
        'phantom': {f.name: getattr(config.phantom, f.name) for f in fields(PhantomConfig)},
        'experiment': {f.name: getattr(config.experiment, f.name) for f in fields(ExperimentSettings)},
    }
