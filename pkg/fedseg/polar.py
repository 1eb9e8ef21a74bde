"""
Cartesian <-> polar resampling.

Image row r of a polar image holds the bilinear sample at radius r. A mask
cell (r, c) stands for the Cartesian pixels that :func:`from_polar` assigns
to it: distance in [r, r+1) and angle nearest to column c. Such cells take
the majority label of those pixels, so the round trip loses only pixels in
cells whose members disagree. Cells no pixel falls into (near the centre,
where the angular step is finer than a pixel) are sampled at the
mid-annulus instead.
"""

import logging

import numpy as np
from scipy import ndimage

from fedseg.errors import ConfigError, ShapeMismatchError
from fedseg.losses import dsc
from fedseg.models import PolarGrid

logger = logging.getLogger(__name__)


def _sample_coordinates(grid: PolarGrid, radial_offset: float = 0.0) -> np.ndarray:
    radius = np.arange(grid.rows, dtype=np.float64)[:, None] + radial_offset
    theta = np.deg2rad(np.arange(grid.cols, dtype=np.float64) * grid.angular_step)[None, :]
    x = grid.center_x + radius * np.cos(theta)
    y = grid.center_y - radius * np.sin(theta)
    return np.stack([y, x])


def _as_plane(image: np.ndarray) -> tuple[np.ndarray, bool]:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0], True
    if image.ndim == 2:
        return image, False
    raise ShapeMismatchError(f"expected H x W or 1 x H x W, got {image.shape}")


def _check_center(grid: PolarGrid, shape: tuple[int, int]) -> None:
    height, width = shape
    if not (0 <= grid.center_x <= width - 1 and 0 <= grid.center_y <= height - 1):
        raise ConfigError(
            f"polar centre ({grid.center_x}, {grid.center_y}) lies outside a {height}x{width} image"
        )


def to_polar(image: np.ndarray, grid: PolarGrid) -> np.ndarray:
    """
    Resample an image onto the polar grid with bilinear interpolation.

    Samples falling outside the image read as 0.

    Args:
        image: H x W or 1 x H x W array
        grid: Resampling grid; its centre must lie inside the image

    Returns:
        max_radius x (360/step) array (with the leading channel kept if given)
    """
    plane, channel = _as_plane(image)
    _check_center(grid, plane.shape)
    coords = _sample_coordinates(grid)
    polar = ndimage.map_coordinates(
        plane.astype(np.float64), coords, order=1, mode='constant', cval=0.0
    )
    dtype = plane.dtype if np.issubdtype(plane.dtype, np.floating) else np.float32
    polar = polar.astype(dtype)
    return polar[None] if channel else polar


def mask_to_polar(mask: np.ndarray, grid: PolarGrid) -> np.ndarray:
    """
    Polar version of a binary mask.

    Each cell takes the majority vote of the pixels mapped to it by
    :func:`from_polar` (ties count as foreground); empty cells fall back to
    a bilinear sample at the mid-annulus.
    """
    plane, channel = _as_plane(mask)
    _check_center(grid, plane.shape)
    coords = _sample_coordinates(grid, radial_offset=0.5)
    weights = ndimage.map_coordinates(
        plane.astype(np.float64), coords, order=1, mode='constant', cval=0.0
    ).ravel()

    rows, cols, inside = _pixel_polar_index(grid, plane.shape)
    cells = rows[inside] * grid.cols + cols[inside]
    members = np.bincount(cells, minlength=grid.rows * grid.cols)
    votes = np.bincount(cells, weights=plane[inside].astype(np.float64), minlength=grid.rows * grid.cols)
    covered = members > 0
    weights[covered] = votes[covered] / members[covered]

    polar = (weights >= 0.5).reshape(grid.shape)
    return polar[None] if channel else polar


def _pixel_polar_index(grid: PolarGrid, out_shape: tuple[int, int]):
    height, width = out_shape
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs - grid.center_x
    dy = grid.center_y - ys
    distance = np.hypot(dx, dy)
    theta = np.degrees(np.arctan2(dy, dx)) % 360.0
    rows = np.floor(distance).astype(np.int64)
    cols = np.rint(theta / grid.angular_step).astype(np.int64) % grid.cols
    inside = distance < grid.max_radius
    return rows, cols, inside


def inscribed_disc(grid: PolarGrid, out_shape: tuple[int, int]) -> np.ndarray:
    """Pixels whose centre lies closer than max_radius to the grid centre."""
    _, _, inside = _pixel_polar_index(grid, out_shape)
    return inside


def from_polar(polar_mask: np.ndarray, grid: PolarGrid, out_shape: tuple[int, int]) -> np.ndarray:
    """
    Map a binary polar mask back to Cartesian pixels (nearest row/column).

    Pixels at distance >= max_radius come back as background.

    Raises:
        ShapeMismatchError: polar_mask does not match the grid
    """
    plane, _ = _as_plane(polar_mask)
    if plane.shape != grid.shape:
        raise ShapeMismatchError(f"polar mask {plane.shape} does not match grid {grid.shape}")
    rows, cols, inside = _pixel_polar_index(grid, tuple(out_shape))
    plane = plane.astype(bool)
    out = np.zeros(tuple(out_shape), dtype=bool)
    out[inside] = plane[rows[inside], cols[inside]]
    return out


def round_trip_dsc(mask: np.ndarray, grid: PolarGrid) -> float:
    """DSC between a mask (restricted to the inscribed disc) and its polar round trip."""
    plane, _ = _as_plane(mask)
    plane = plane.astype(bool)
    restricted = plane & inscribed_disc(grid, plane.shape)
    recovered = from_polar(mask_to_polar(plane, grid), grid, plane.shape)
    return dsc(restricted, recovered)


def polar_image_shape(grid: PolarGrid) -> tuple[int, int, int]:
    """Single-channel network input shape for polar-mode models."""
    return 1, grid.rows, grid.cols


