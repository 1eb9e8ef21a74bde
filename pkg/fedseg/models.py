"""
Configuration models and enums shared across fedseg.
"""

from dataclasses import dataclass, field
from enum import Enum
import math
from typing import Optional

from fedseg.errors import ConfigError


class CoordinateMode(str, Enum):
    """Image space the segmentation models operate in."""

    CARTESIAN = 'cartesian'
    POLAR = 'polar'


class PostProcess(str, Enum):
    """Mask post-processing applied after binarization."""

    NONE = 'none'
    LARGEST_CC_FILL = 'largest_cc_fill'
    RADIAL_CONSOLIDATE = 'radial_consolidate'


class BurdenBand(str, Enum):
    """Plaque burden risk band (Low < 50%, Moderate 50-70%, High > 70%)."""

    LOW = 'low'
    MODERATE = 'moderate'
    HIGH = 'high'

    @property
    def bounds(self) -> tuple[float, float]:
        return {
            BurdenBand.LOW: (0.0, 0.50),
            BurdenBand.MODERATE: (0.50, 0.70),
            BurdenBand.HIGH: (0.70, 1.0),
        }[self]

    def contains(self, index: float) -> bool:
        low, high = self.bounds
        if self is BurdenBand.LOW:
            return index < high
        if self is BurdenBand.HIGH:
            return index > low
        return low <= index <= high

    @classmethod
    def classify(cls, index: float) -> 'BurdenBand':
        """Map a burden index to its risk band."""
        if index < 0.50:
            return cls.LOW
        if index > 0.70:
            return cls.HIGH
        return cls.MODERATE


BAND_ORDER = (BurdenBand.LOW, BurdenBand.MODERATE, BurdenBand.HIGH)


@dataclass(frozen=True)
class PolarGrid:
    """Resampling contract between Cartesian and polar image spaces.

    Rows index the radius (0 .. max_radius-1 pixels), columns index the angle
    in steps of ``angular_step`` degrees, counterclockwise from +x with the
    y axis pointing up.
    """

    center_x: float
    center_y: float
    max_radius: int
    angular_step: float

    def __post_init__(self):
        if int(self.max_radius) != self.max_radius or self.max_radius < 1:
            raise ConfigError(f"PolarGrid max_radius must be an integer >= 1, got {self.max_radius}")
        if self.angular_step <= 0:
            raise ConfigError(f"PolarGrid angular_step must be positive, got {self.angular_step}")
        cols = 360.0 / self.angular_step
        if abs(cols - round(cols)) > 1e-9:
            raise ConfigError(f"360 is not divisible by angular_step {self.angular_step}")

    @property
    def rows(self) -> int:
        return int(self.max_radius)

    @property
    def cols(self) -> int:
        return int(round(360.0 / self.angular_step))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @classmethod
    def centered(cls, image_shape: tuple[int, int], max_radius: int, angular_step: float) -> 'PolarGrid':
        """Grid centred on the middle of an H x W image."""
        height, width = image_shape
        return cls(
            center_x=(width - 1) / 2.0,
            center_y=(height - 1) / 2.0,
            max_radius=max_radius,
            angular_step=angular_step,
        )

    @classmethod
    def desk(cls, image_size: int = 64) -> 'PolarGrid':
        """Desk-scale grid: radius half the frame, 3 degree steps (32x120 at 64 px)."""
        return cls.centered((image_size, image_size), image_size // 2, 3.0)

    @classmethod
    def full_scale(cls) -> 'PolarGrid':
        """512x512 frames, radius 256, 0.5 degree steps -> 256x720 polar images."""
        return cls.centered((512, 512), 256, 0.5)

    def to_dict(self) -> dict:
        return {
            'center_x': self.center_x,
            'center_y': self.center_y,
            'max_radius': self.max_radius,
            'angular_step': self.angular_step,
        }


@dataclass(frozen=True)
class UNetConfig:
    """Shape and initialization of one segmentation network."""

    input_shape: tuple[int, int, int] = (1, 64, 64)
    depth: int = 2
    base_channels: int = 8
    seed: int = 0

    def validate(self) -> None:
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        channels, height, width = self.input_shape
        if channels != 1:
            raise ConfigError(f"input_shape must have one channel, got {channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        factor = 2 ** self.depth
        if height % factor or width % factor:
            raise ConfigError(
                f"spatial dims {height}x{width} are not divisible by 2^depth={factor}"
            )


@dataclass(frozen=True)
class FedConfig:
    """Federated averaging protocol constants."""

    n_clients: int = 3
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 4
    learning_rate: float = 1.0e-5
    seed: int = 0
    optimizer: str = 'adam'
    l2_lambda: float = 1.0e-4
    omega: float = 0.5
    handshake_timeout_s: float = 30.0
    round_timeout_s: float = 600.0
    eval_every_round: bool = False

    def validate(self) -> None:
        for name in ('n_clients', 'local_epochs', 'batch_size'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.optimizer not in ('adam', 'sgd'):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError(f"omega must lie in [0, 1], got {self.omega}")
        if self.handshake_timeout_s <= 0 or self.round_timeout_s <= 0:
            raise ConfigError("transport timeouts must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    """Two-stage inference settings."""

    coordinate_mode: CoordinateMode = CoordinateMode.CARTESIAN
    binarize_threshold: float = 0.5
    postprocess: PostProcess = PostProcess.NONE
    grid: Optional[PolarGrid] = None

    def validate(self) -> None:
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError(f"binarize_threshold must lie in (0, 1), got {self.binarize_threshold}")
        if self.coordinate_mode is CoordinateMode.POLAR and self.grid is None:
            raise ConfigError("polar coordinate mode requires a PolarGrid")
        if (self.postprocess is PostProcess.RADIAL_CONSOLIDATE
                and self.coordinate_mode is not CoordinateMode.POLAR):
            raise ConfigError("radial consolidation is only valid in polar mode")


@dataclass(frozen=True)
class PhantomConfig:
    """Synthetic vessel phantom parameters (contrast levels are free parameters)."""

    image_size: int = 64
    pixel_spacing_mm: float = 0.02
    frame_spacing_mm: float = 3.0
    lumen_intensity: float = 0.08
    plaque_intensity: float = 0.75
    adventitia_intensity: float = 0.40
    speckle: float = 0.5
    attenuation: float = 0.35
    dropout_deg: float = 0.0
    dropout_factor: float = 0.25
    frames_min: int = 10
    frames_max: int = 14

    def validate(self) -> None:
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.frames_min < 1 or self.frames_max < self.frames_min:
            raise ConfigError(f"invalid frame count range {self.frames_min}..{self.frames_max}")
        if not 0.0 <= self.dropout_deg < 180.0:
            raise ConfigError(f"dropout_deg must lie in [0, 180), got {self.dropout_deg}")


@dataclass(frozen=True)
class ExperimentSettings:
    """Evaluation protocol: five-fold CV or a single 89/11 holdout split."""

    protocol: str = 'holdout'
    folds: int = 5
    holdout_fraction: float = 16 / 151
    include_baseline: bool = True

    def validate(self) -> None:
        if self.protocol not in ('holdout', 'cv'):
            raise ConfigError(f"protocol must be 'holdout' or 'cv', got {self.protocol!r}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction}")


@dataclass(frozen=True)
class AppConfig:
    """Everything a config file can set."""

    fed: FedConfig = field(default_factory=FedConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
