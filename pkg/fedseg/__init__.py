"""
fedseg - federated IVUS plaque segmentation simulator.

Parallel EEM and lumen U-Nets trained with federated averaging on synthetic
IVUS phantoms, in Cartesian or polar image space.
"""

__version__ = '1.0.0'

from fedseg.errors import FedSegError
from fedseg.models import (
    AppConfig, BurdenBand, CoordinateMode, ExperimentSettings, FedConfig,
    PhantomConfig, PipelineConfig, PolarGrid, PostProcess, UNetConfig,
)
from fedseg.config_loader import ConfigLoader, load_config

__all__ = [
    'AppConfig',
    'BurdenBand',
    'ConfigLoader',
    'CoordinateMode',
    'ExperimentSettings',
    'FedConfig',
    'FedSegError',
    'PhantomConfig',
    'PipelineConfig',
    'PolarGrid',
    'PostProcess',
    'UNetConfig',
    'load_config',
]
