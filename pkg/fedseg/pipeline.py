"""
Two-stage inference: EEM and lumen networks, binarization, optional
post-processing and derivation of the plaque mask, then area/volume/burden
measurement.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage

from fedseg.errors import ConfigError, EmptyDatasetError, ShapeMismatchError
from fedseg.losses import MetricsRecord
from fedseg.models import CoordinateMode, PipelineConfig, PolarGrid, PostProcess, UNetConfig
from fedseg.polar import from_polar, mask_to_polar, to_polar

logger = logging.getLogger(__name__)

MEDIAN_WINDOW = 5
MEDIAN_MAX_PASSES = 100
DEFAULT_FRAME_SPACING_MM = 3.0


class SegmentationModel(Protocol):
    config: UNetConfig

    def predict(self, batch: np.ndarray) -> np.ndarray:
        ...


@dataclass
class SegResult:
    """Cartesian masks of one frame plus the raw probability maps (model space)."""

    eem_mask: np.ndarray
    lumen_mask: np.ndarray
    plaque_mask: np.ndarray
    eem_prob: np.ndarray
    lumen_prob: np.ndarray


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where the probability is strictly above ``threshold``."""
    return np.asarray(prob) > threshold


def postprocess_cartesian(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected component and fill its holes."""
    labels, count = ndimage.label(np.asarray(mask, dtype=bool))
    if count == 0:
        return np.zeros(np.shape(mask), dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    largest = labels == int(np.argmax(sizes))
    return ndimage.binary_fill_holes(largest)


def _runs(column: np.ndarray) -> list[tuple[int, int]]:
    """(start, stop) of each run of True values, stop exclusive."""
    padded = np.concatenate([[0], column.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))


def _median_root(profile: np.ndarray) -> np.ndarray:
    current = profile
    for _ in range(MEDIAN_MAX_PASSES):
        smoothed = ndimage.median_filter(current, size=MEDIAN_WINDOW, mode='wrap')
        if np.array_equal(smoothed, current):
            return current
        current = smoothed
    logger.warning("Radial profile did not settle after %d median passes", MEDIAN_MAX_PASSES)
    return current


def postprocess_polar(polar_mask: np.ndarray, region: str) -> np.ndarray:
    """
    Make a polar mask star-shaped around the catheter.

    For each angle the boundary radius is taken from the column's runs: the
    outer edge of the outermost run for ``region='eem'``, the outer edge of
    the longest run (innermost on ties) for ``region='lumen'``. The circular
    median of that radial profile is iterated until it no longer changes and
    every column is then refilled from radius 0.

    Raises:
        ConfigError: region is not 'eem' or 'lumen'
    """
    if region not in ('eem', 'lumen'):
        raise ConfigError(f"region must be 'eem' or 'lumen', got {region!r}")
    mask = np.asarray(polar_mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeMismatchError(f"polar mask must be 2-D, got {mask.shape}")
    rows, cols = mask.shape
    profile = np.zeros(cols, dtype=np.int64)
    for col in range(cols):
        runs = _runs(mask[:, col])
        if not runs:
            continue
        if region == 'eem':
            profile[col] = runs[-1][1]
        else:
            profile[col] = max(runs, key=lambda run: (run[1] - run[0], -run[0]))[1]
    profile = _median_root(profile)
    return np.arange(rows)[:, None] < profile[None, :]


def _expected_shape(config: PipelineConfig, frame_shape: tuple[int, int]) -> tuple[int, int]:
    if config.coordinate_mode is CoordinateMode.POLAR:
        return config.grid.shape
    return tuple(frame_shape)


def _check_model(model: SegmentationModel, config: PipelineConfig, frame_shape: tuple[int, int]) -> None:
    expected = _expected_shape(config, frame_shape)
    actual = tuple(model.config.input_shape[1:])
    if actual == expected:
        return
    other = frame_shape if config.coordinate_mode is CoordinateMode.POLAR else (
        config.grid.shape if config.grid is not None else None)
    if actual == tuple(other or ()):
        raise ConfigError(
            f"model expects {actual} inputs, which belong to the other coordinate mode "
            f"than {config.coordinate_mode.value}"
        )
    raise ShapeMismatchError(f"model input {actual} does not match pipeline input {expected}")


def _assemble(eem_prob: np.ndarray, lumen_prob: np.ndarray, frame_shape: tuple[int, int],
              config: PipelineConfig) -> SegResult:
    eem = binarize(eem_prob, config.binarize_threshold)
    lumen = binarize(lumen_prob, config.binarize_threshold)
    if config.coordinate_mode is CoordinateMode.POLAR:
        if config.postprocess is PostProcess.RADIAL_CONSOLIDATE:
            eem = postprocess_polar(eem, 'eem')
            lumen = postprocess_polar(lumen, 'lumen')
        eem = from_polar(eem, config.grid, frame_shape)
        lumen = from_polar(lumen, config.grid, frame_shape)
    if config.postprocess is PostProcess.LARGEST_CC_FILL:
        eem = postprocess_cartesian(eem)
        lumen = postprocess_cartesian(lumen)
    lumen = lumen & eem
    return SegResult(
        eem_mask=eem,
        lumen_mask=lumen,
        plaque_mask=eem & ~lumen,
        eem_prob=eem_prob,
        lumen_prob=lumen_prob,
    )


def model_input(frame: np.ndarray, config: PipelineConfig) -> np.ndarray:
    """The 2-D image a model sees for ``frame`` under ``config``."""
    image = np.asarray(frame)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ShapeMismatchError(f"frame must be H x W, got {image.shape}")
    if config.coordinate_mode is CoordinateMode.POLAR:
        return to_polar(image, config.grid)
    return image.astype(np.float32, copy=False)


def model_target(mask: np.ndarray, config: PipelineConfig) -> np.ndarray:
    """Training target matching :func:`model_input`."""
    if config.coordinate_mode is CoordinateMode.POLAR:
        return mask_to_polar(mask, config.grid)
    return np.asarray(mask, dtype=bool)


def _predict_both(eem_model: SegmentationModel, lumen_model: SegmentationModel,
                  batch: np.ndarray, parallel: bool) -> tuple[np.ndarray, np.ndarray]:
    if parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            eem_future = pool.submit(eem_model.predict, batch)
            lumen_future = pool.submit(lumen_model.predict, batch)
            return eem_future.result(), lumen_future.result()
    return eem_model.predict(batch), lumen_model.predict(batch)


def segment_frame(frame: np.ndarray, eem_model: SegmentationModel, lumen_model: SegmentationModel,
                  config: PipelineConfig, parallel: bool = False) -> SegResult:
    """
    Segment one Cartesian frame.

    The two networks see the same input and are independent; ``parallel``
    runs them on two threads with identical results.

    Raises:
        ShapeMismatchError: Frame does not fit the models
        ConfigError: Models were built for the other coordinate mode
    """
    frame = np.asarray(frame)
    if frame.ndim == 3 and frame.shape[0] == 1:
        frame = frame[0]
    return segment_frames(frame[None], eem_model, lumen_model, config, parallel=parallel)[0]


def segment_frames(frames: np.ndarray, eem_model: SegmentationModel, lumen_model: SegmentationModel,
                   config: PipelineConfig, parallel: bool = False, batch_size: int = 16) -> list[SegResult]:
    """Batched :func:`segment_frame` over an N x H x W stack."""
    config.validate()
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ShapeMismatchError(f"frames must be N x H x W, got {frames.shape}")
    frame_shape = frames.shape[1:]
    _check_model(eem_model, config, frame_shape)
    _check_model(lumen_model, config, frame_shape)
    results: list[SegResult] = []
    for start in range(0, frames.shape[0], batch_size):
        chunk = frames[start:start + batch_size]
        batch = np.stack([model_input(frame, config) for frame in chunk])[:, None]
        eem_probs, lumen_probs = _predict_both(eem_model, lumen_model, batch, parallel)
        for index in range(chunk.shape[0]):
            results.append(_assemble(eem_probs[index, 0], lumen_probs[index, 0], frame_shape, config))
    return results


@dataclass(frozen=True)
class FrameAreas:
    """Pixel counts of one frame's three masks."""

    eem_px: int
    lumen_px: int
    plaque_px: int

    @property
    def burden_index(self) -> float:
        """Plaque over EEM area; 0 when the EEM is empty."""
        return self.plaque_px / self.eem_px if self.eem_px else 0.0


def frame_areas(eem: np.ndarray, lumen: np.ndarray, plaque: np.ndarray) -> FrameAreas:
    return FrameAreas(
        eem_px=int(np.count_nonzero(eem)),
        lumen_px=int(np.count_nonzero(lumen)),
        plaque_px=int(np.count_nonzero(plaque)),
    )


def measure(result: SegResult, pixel_spacing_mm: float, case_id: str = '') -> dict[str, MetricsRecord]:
    """
    Areas and burden index of one segmented frame, keyed by structure.

    Overlap scores and volume stay unset; they need a reference or a whole case.
    """
    if pixel_spacing_mm <= 0:
        raise ConfigError(f"pixel spacing must be positive, got {pixel_spacing_mm}")
    areas = frame_areas(result.eem_mask, result.lumen_mask, result.plaque_mask)
    pixel_area = pixel_spacing_mm ** 2
    return {
        structure: MetricsRecord(
            case_id=case_id,
            structure=structure,
            area_px=float(count),
            area_mm2=count * pixel_area,
            burden_index=areas.burden_index,
        )
        for structure, count in (('eem', areas.eem_px), ('lumen', areas.lumen_px),
                                 ('plaque', areas.plaque_px))
    }


def case_volumes(per_frame_areas: Sequence[Sequence[float]],
                 frame_spacing_mm: float = DEFAULT_FRAME_SPACING_MM) -> tuple[float, float, float]:
    """
    Disc-summation volumes (EEM, lumen, plaque) from per-frame areas in mm^2.

    Raises:
        ConfigError: Non-positive frame spacing
        EmptyDatasetError: No frames
    """
    if frame_spacing_mm <= 0:
        raise ConfigError(f"frame spacing must be positive, got {frame_spacing_mm}")
    areas = np.asarray(per_frame_areas, dtype=np.float64).reshape(-1, 3)
    if not len(areas):
        raise EmptyDatasetError("volumes need at least one frame")
    volumes = areas.sum(axis=0) * frame_spacing_mm
    return float(volumes[0]), float(volumes[1]), float(volumes[2])


def resolve_pipeline(coords: str, post: bool, grid: Optional[PolarGrid] = None,
                     threshold: float = 0.5) -> PipelineConfig:
    """PipelineConfig from the CLI's --coords/--post switches."""
    mode = CoordinateMode(coords)
    if not post:
        postprocess = PostProcess.NONE
    elif mode is CoordinateMode.POLAR:
        postprocess = PostProcess.RADIAL_CONSOLIDATE
    else:
        postprocess = PostProcess.LARGEST_CC_FILL
    return PipelineConfig(coordinate_mode=mode, binarize_threshold=threshold,
                          postprocess=postprocess, grid=grid)
