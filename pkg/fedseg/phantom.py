"""
Synthetic intravascular-ultrasound-like vessel phantoms.

A case is a short pullback: a sequence of frames whose vessel geometry (an
elliptical external elastic membrane with an elliptical lumen inside it)
drifts smoothly from frame to frame. Each frame carries the ground-truth EEM,
lumen and plaque masks; each case sits in one plaque burden risk band.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import json
import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from fedseg.errors import BandUnreachableError, ConfigError, GeometryError, PartitionError
from fedseg.models import BAND_ORDER, BurdenBand, PhantomConfig
from fedseg.utils import derive_seed, frame_to_uint8, mask_to_uint8, read_pgm, write_pgm

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = 'manifest.json'
SPACING_KEYS = ('pixel_spacing_mm', 'frame_spacing_mm')

# frames per risk band in the three clinical datasets the presets mimic
BAND_PRESETS = {
    'dataset1': (6039, 16592, 3411),
    'dataset2': (7907, 15737, 2714),
    'dataset3': (7864, 15851, 2634),
}

# burden targets sit inside each band with a margin for pixel quantization
BAND_TARGETS = {
    BurdenBand.LOW: (0.30, 0.45),
    BurdenBand.MODERATE: (0.53, 0.67),
    BurdenBand.HIGH: (0.73, 0.82),
}

_CONTAINMENT_MARGIN_PX = 0.75
_BAND_ATTEMPTS = 5


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in pixel coordinates; ``angle_deg`` is counterclockwise with y up."""

    center_x: float
    center_y: float
    semi_major: float
    semi_minor: float
    angle_deg: float

    @property
    def area(self) -> float:
        return math.pi * self.semi_major * self.semi_minor

    def normalized_radius(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """1.0 on the boundary, < 1 inside."""
        phi = math.radians(self.angle_deg)
        dx = np.asarray(xs, dtype=np.float64) - self.center_x
        dy = self.center_y - np.asarray(ys, dtype=np.float64)
        u = dx * math.cos(phi) + dy * math.sin(phi)
        v = -dx * math.sin(phi) + dy * math.cos(phi)
        return np.sqrt((u / self.semi_major) ** 2 + (v / self.semi_minor) ** 2)

    def rasterize(self, shape: tuple[int, int]) -> np.ndarray:
        ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
        return self.normalized_radius(xs, ys) <= 1.0

    def boundary_points(self, count: int = 180) -> tuple[np.ndarray, np.ndarray]:
        t = np.linspace(0.0, 2.0 * math.pi, count, endpoint=False)
        phi = math.radians(self.angle_deg)
        u = self.semi_major * np.cos(t)
        v = self.semi_minor * np.sin(t)
        xs = self.center_x + u * math.cos(phi) - v * math.sin(phi)
        ys = self.center_y - (u * math.sin(phi) + v * math.cos(phi))
        return xs, ys

    def contains(self, other: 'Ellipse', margin_px: float = 0.0) -> bool:
        """True when ``other`` lies inside this ellipse with ``margin_px`` to spare."""
        xs, ys = other.boundary_points()
        limit = 1.0 - margin_px / self.semi_minor
        return bool(np.all(self.normalized_radius(xs, ys) < limit))


@dataclass(frozen=True)
class VesselGeometry:
    eem: Ellipse
    lumen: Ellipse


@dataclass(frozen=True)
class NoiseParams:
    """Image formation nuisance terms."""

    speckle: float = 0.5
    attenuation: float = 0.35
    dropout_deg: float = 0.0
    dropout_factor: float = 0.25

    @classmethod
    def off(cls) -> 'NoiseParams':
        return cls(speckle=0.0, attenuation=0.0, dropout_deg=0.0)

    @classmethod
    def from_config(cls, config: PhantomConfig) -> 'NoiseParams':
        return cls(
            speckle=config.speckle,
            attenuation=config.attenuation,
            dropout_deg=config.dropout_deg,
            dropout_factor=config.dropout_factor,
        )


@dataclass
class PhantomCase:
    """One generated or loaded pullback with its ground truth."""

    case_id: str
    band: BurdenBand
    frames: np.ndarray
    eem_masks: np.ndarray
    lumen_masks: np.ndarray
    plaque_masks: np.ndarray
    pixel_spacing_mm: float
    frame_spacing_mm: float

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def burden_indices(self) -> np.ndarray:
        eem = self.eem_masks.reshape(self.n_frames, -1).sum(axis=1).astype(np.float64)
        plaque = self.plaque_masks.reshape(self.n_frames, -1).sum(axis=1).astype(np.float64)
        return np.divide(plaque, eem, out=np.zeros_like(eem), where=eem > 0)

    @property
    def mean_burden(self) -> float:
        return float(np.mean(self.burden_indices()))


@dataclass(frozen=True)
class CaseEntry:
    """Manifest row for one case; paths are relative to the manifest directory."""

    case_id: str
    band: BurdenBand
    seed: int
    mean_burden: float
    frames: tuple[str, ...]
    eem_masks: tuple[str, ...]
    lumen_masks: tuple[str, ...]
    plaque_masks: tuple[str, ...]

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['band'] = self.band.value
        for key in ('frames', 'eem_masks', 'lumen_masks', 'plaque_masks'):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'CaseEntry':
        return cls(
            case_id=data['case_id'],
            band=BurdenBand(data['band']),
            seed=int(data['seed']),
            mean_burden=float(data['mean_burden']),
            frames=tuple(data['frames']),
            eem_masks=tuple(data['eem_masks']),
            lumen_masks=tuple(data['lumen_masks']),
            plaque_masks=tuple(data['plaque_masks']),
        )


@dataclass
class DatasetManifest:
    """Index of a generated dataset on disk."""

    seed: int
    band_mix: dict[str, float]
    phantom: PhantomConfig
    cases: list[CaseEntry] = field(default_factory=list)
    preset: Optional[str] = None
    version: int = MANIFEST_VERSION
    root: Optional[Path] = None

    @property
    def case_ids(self) -> list[str]:
        return [entry.case_id for entry in self.cases]

    def entry(self, case_id: str) -> CaseEntry:
        for entry in self.cases:
            if entry.case_id == case_id:
                return entry
        raise KeyError(f"no case {case_id!r} in manifest")

    @property
    def pixel_spacing_mm(self) -> float:
        return self.phantom.pixel_spacing_mm

    @property
    def frame_spacing_mm(self) -> float:
        return self.phantom.frame_spacing_mm

    def to_dict(self) -> dict:
        return {
            'version': self.version,
            'seed': self.seed,
            'pixel_spacing_mm': self.pixel_spacing_mm,
            'frame_spacing_mm': self.frame_spacing_mm,
            'preset': self.preset,
            'band_mix': dict(self.band_mix),
            'phantom': {k: v for k, v in asdict(self.phantom).items() if k not in SPACING_KEYS},
            'cases': [entry.to_dict() for entry in self.cases],
        }

    @classmethod
    def from_dict(cls, data: dict, root: Optional[Path] = None) -> 'DatasetManifest':
        if data.get('version') != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {data.get('version')!r}")
        phantom = dict(data.get('phantom', {}))
        for key in SPACING_KEYS:
            if key not in data:
                raise ConfigError(f"manifest is missing {key}")
            phantom[key] = float(data[key])
        return cls(
            seed=int(data['seed']),
            band_mix={k: float(v) for k, v in data['band_mix'].items()},
            phantom=PhantomConfig(**phantom),
            cases=[CaseEntry.from_dict(item) for item in data['cases']],
            preset=data.get('preset'),
            root=root,
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'DatasetManifest':
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_dict(data, root=path.parent)


def uint8_to_frame(pixels: np.ndarray) -> np.ndarray:
    """8-bit gray levels to float32 intensities k/255."""
    return (pixels.astype(np.float64) / 255.0).astype(np.float32)


def validate_geometry(geometry: VesselGeometry, image_size: int) -> None:
    """
    Raises:
        GeometryError: The lumen leaves the EEM or the EEM leaves the image
    """
    if not geometry.eem.contains(geometry.lumen):
        raise GeometryError("lumen is not contained in the EEM")
    xs, ys = geometry.eem.boundary_points()
    if xs.min() < 0.5 or ys.min() < 0.5 or xs.max() > image_size - 1.5 or ys.max() > image_size - 1.5:
        raise GeometryError(f"EEM leaves the {image_size}x{image_size} image")


def gen_frame(seed: int, geometry: VesselGeometry, noise: NoiseParams,
              config: PhantomConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Render one frame.

    Args:
        seed: Speckle seed
        geometry: EEM and lumen ellipses
        noise: Speckle, attenuation and dropout settings
        config: Image size and tissue intensities

    Returns:
        (frame float32 in [0, 1] quantized to k/255, eem mask, lumen mask)

    Raises:
        GeometryError: Containment or image-bounds violation
    """
    size = config.image_size
    validate_geometry(geometry, size)
    shape = (size, size)
    eem = geometry.eem.rasterize(shape)
    lumen = geometry.lumen.rasterize(shape) & eem

    image = np.full(shape, config.adventitia_intensity, dtype=np.float64)
    image[eem & ~lumen] = config.plaque_intensity
    image[lumen] = config.lumen_intensity

    rng = np.random.default_rng(seed)
    u = rng.random((2, size, size))
    image *= (1.0 - noise.speckle) + noise.speckle * 4.0 * u[0] * u[1]

    center = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs - center, center - ys
    if noise.attenuation:
        image *= np.exp(-noise.attenuation * np.hypot(dx, dy) / (size / 2.0))
    if noise.dropout_deg > 0:
        theta = np.degrees(np.arctan2(dy, dx)) % 180.0
        off_axis = np.minimum(theta, 180.0 - theta)
        image[(off_axis <= noise.dropout_deg / 2.0) & ~lumen] *= noise.dropout_factor

    pixels = frame_to_uint8(image)
    return uint8_to_frame(pixels), eem, lumen


class _Walk:
    """Gaussian random walk reflected into [low, high] (or wrapped)."""

    def __init__(self, rng: np.random.Generator, low: float, high: float, step: float,
                 wrap: bool = False):
        self.rng = rng
        self.low, self.high, self.step, self.wrap = low, high, step, wrap
        self.value = float(rng.uniform(low, high))

    def advance(self) -> float:
        value = self.value + self.step * float(self.rng.standard_normal())
        span = self.high - self.low
        if self.wrap:
            value = self.low + (value - self.low) % span
        else:
            while value < self.low or value > self.high:
                value = 2 * self.low - value if value < self.low else 2 * self.high - value
        self.value = value
        return value


def _fit_lumen(eem: Ellipse, burden: float, q_unit: float, rotation: float,
               offset_dir: float, offset_unit: float) -> Ellipse:
    lumen_fraction = 1.0 - burden
    aspect = eem.semi_minor / eem.semi_major
    q_low, q_high = aspect, min(1.0, aspect / lumen_fraction)
    q = q_low + (0.1 + 0.8 * q_unit) * (q_high - q_low)
    semi_major = math.sqrt(lumen_fraction * eem.semi_major * eem.semi_minor / q)
    lumen = Ellipse(eem.center_x, eem.center_y, semi_major, q * semi_major, eem.angle_deg + rotation)
    if not eem.contains(lumen, _CONTAINMENT_MARGIN_PX):
        lumen = replace(lumen, angle_deg=eem.angle_deg)
        if not eem.contains(lumen, _CONTAINMENT_MARGIN_PX):
            raise GeometryError(f"lumen for burden {burden:.3f} does not fit inside the EEM")

    direction = math.radians(offset_dir)
    ux, uy = math.cos(direction), -math.sin(direction)

    def shifted(distance: float) -> Ellipse:
        return replace(lumen, center_x=lumen.center_x + distance * ux,
                       center_y=lumen.center_y + distance * uy)

    low, high = 0.0, eem.semi_major
    for _ in range(24):
        mid = (low + high) / 2.0
        if eem.contains(shifted(mid), _CONTAINMENT_MARGIN_PX):
            low = mid
        else:
            high = mid
    return shifted(offset_unit * low)


def _case_geometries(seed: int, band: BurdenBand, n_frames: int, image_size: int) -> list[VesselGeometry]:
    rng = np.random.default_rng(seed)
    half = image_size / 2.0
    center = (image_size - 1) / 2.0
    burden_low, burden_high = BAND_TARGETS[band]
    walks = {
        'semi_major': _Walk(rng, 0.60 * half, 0.78 * half, 0.012 * half),
        'aspect': _Walk(rng, 0.78, 0.95, 0.01),
        'angle': _Walk(rng, 0.0, 180.0, 3.0, wrap=True),
        'dx': _Walk(rng, -0.04 * half, 0.04 * half, 0.01 * half),
        'dy': _Walk(rng, -0.04 * half, 0.04 * half, 0.01 * half),
        'burden': _Walk(rng, burden_low, burden_high, 0.008),
        'q_unit': _Walk(rng, 0.0, 1.0, 0.05),
        'rotation': _Walk(rng, -10.0, 10.0, 1.5),
        'offset_dir': _Walk(rng, 0.0, 360.0, 8.0, wrap=True),
        'offset_unit': _Walk(rng, 0.0, 0.7, 0.04),
    }
    geometries = []
    for index in range(n_frames):
        if index:
            for walk in walks.values():
                walk.advance()
        state = {name: walk.value for name, walk in walks.items()}
        eem = Ellipse(
            center_x=center + state['dx'],
            center_y=center + state['dy'],
            semi_major=state['semi_major'],
            semi_minor=state['semi_major'] * state['aspect'],
            angle_deg=state['angle'],
        )
        lumen = _fit_lumen(eem, state['burden'], state['q_unit'], state['rotation'],
                           state['offset_dir'], state['offset_unit'])
        geometries.append(VesselGeometry(eem=eem, lumen=lumen))
    return geometries


def gen_case(seed: int, band: BurdenBand, n_frames: int, config: Optional[PhantomConfig] = None,
             noise: Optional[NoiseParams] = None, case_id: str = 'case_000') -> PhantomCase:
    """
    Generate one case whose mean burden index falls in ``band``.

    Raises:
        BandUnreachableError: No attempt landed inside the band
        ConfigError: n_frames < 1 or invalid config
    """
    config = config or PhantomConfig()
    config.validate()
    noise = noise or NoiseParams.from_config(config)
    if n_frames < 1:
        raise ConfigError(f"n_frames must be >= 1, got {n_frames}")
    band = BurdenBand(band)

    for attempt in range(_BAND_ATTEMPTS):
        geometry_seed = derive_seed(seed, 'geometry', attempt)
        geometries = _case_geometries(geometry_seed, band, n_frames, config.image_size)
        rendered = [
            gen_frame(derive_seed(seed, 'frame', index), geometry, noise, config)
            for index, geometry in enumerate(geometries)
        ]
        frames = np.stack([r[0] for r in rendered])
        eem = np.stack([r[1] for r in rendered])
        lumen = np.stack([r[2] for r in rendered])
        case = PhantomCase(
            case_id=case_id,
            band=band,
            frames=frames,
            eem_masks=eem,
            lumen_masks=lumen,
            plaque_masks=eem & ~lumen,
            pixel_spacing_mm=config.pixel_spacing_mm,
            frame_spacing_mm=config.frame_spacing_mm,
        )
        if band.contains(case.mean_burden):
            return case
        logger.debug("%s attempt %d missed band %s (burden %.3f)", case_id, attempt, band.value,
                     case.mean_burden)
    raise BandUnreachableError(f"{case_id}: could not reach band {band.value} in {_BAND_ATTEMPTS} attempts")


def resolve_band_mix(band_mix: Union[str, Sequence[float], dict, None]) -> tuple[Optional[str], dict[str, float]]:
    """Normalize a preset name, a 3-sequence or a band->weight dict into proportions."""
    preset = None
    if band_mix is None:
        band_mix = 'dataset1'
    if isinstance(band_mix, str):
        if band_mix not in BAND_PRESETS:
            raise ConfigError(f"unknown band preset {band_mix!r}; choose from {sorted(BAND_PRESETS)}")
        preset, weights = band_mix, BAND_PRESETS[band_mix]
    elif isinstance(band_mix, dict):
        weights = tuple(float(band_mix.get(band.value, 0.0)) for band in BAND_ORDER)
    else:
        weights = tuple(float(w) for w in band_mix)
    if len(weights) != 3 or any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ConfigError(f"band mix needs three non-negative weights, got {weights}")
    total = float(sum(weights))
    return preset, {band.value: w / total for band, w in zip(BAND_ORDER, weights)}


def largest_remainder(total: int, proportions: Sequence[float]) -> list[int]:
    """
    Integer counts summing to ``total`` that track ``proportions``.

    Ties in the remainders go to the earlier entry.
    """
    if abs(sum(proportions) - 1.0) > 1e-9:
        raise ConfigError(f"proportions must sum to 1, got {sum(proportions)}")
    nonzero = sum(1 for p in proportions if p > 0)
    if total < nonzero:
        raise ConfigError(f"{total} cases cannot cover {nonzero} non-empty bands")
    quotas = [total * p for p in proportions]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


def _write_case(case: PhantomCase, seed: int, out_dir: Path) -> CaseEntry:
    case_dir = out_dir / case.case_id
    paths: dict[str, list[str]] = {key: [] for key in ('frames', 'eem_masks', 'lumen_masks', 'plaque_masks')}
    for index in range(case.n_frames):
        for key, stem, pixels in (
            ('frames', 'frame', frame_to_uint8(case.frames[index])),
            ('eem_masks', 'eem', mask_to_uint8(case.eem_masks[index])),
            ('lumen_masks', 'lumen', mask_to_uint8(case.lumen_masks[index])),
            ('plaque_masks', 'plaque', mask_to_uint8(case.plaque_masks[index])),
        ):
            name = f'{stem}_{index:03d}.pgm'
            write_pgm(case_dir / name, pixels)
            paths[key].append(f'{case.case_id}/{name}')
    return CaseEntry(
        case_id=case.case_id,
        band=case.band,
        seed=seed,
        mean_burden=case.mean_burden,
        frames=tuple(paths['frames']),
        eem_masks=tuple(paths['eem_masks']),
        lumen_masks=tuple(paths['lumen_masks']),
        plaque_masks=tuple(paths['plaque_masks']),
    )


def gen_dataset(seed: int, n_cases: int, band_mix: Union[str, Sequence[float], dict, None],
                out_dir: Union[str, Path], config: Optional[PhantomConfig] = None,
                noise: Optional[NoiseParams] = None, workers: int = 1) -> DatasetManifest:
    """
    Generate ``n_cases`` cases on disk and write ``manifest.json``.

    Band counts follow ``band_mix`` by largest-remainder rounding; case order
    is a seeded shuffle of the bands. Output is byte-identical for equal
    arguments, whatever ``workers`` is.

    Returns:
        The manifest that was written
    """
    config = config or PhantomConfig()
    config.validate()
    if n_cases < 1:
        raise ConfigError(f"n_cases must be >= 1, got {n_cases}")
    preset, proportions = resolve_band_mix(band_mix)
    counts = largest_remainder(n_cases, [proportions[band.value] for band in BAND_ORDER])
    bands = [band for band, count in zip(BAND_ORDER, counts) for _ in range(count)]
    order = np.random.default_rng(derive_seed(seed, 'bands')).permutation(n_cases)
    bands = [bands[i] for i in order]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def build(index: int) -> CaseEntry:
        case_seed = derive_seed(seed, 'case', index)
        n_frames = int(np.random.default_rng(derive_seed(seed, 'frames', index)).integers(
            config.frames_min, config.frames_max + 1))
        case = gen_case(case_seed, bands[index], n_frames, config, noise, case_id=f'case_{index:03d}')
        return _write_case(case, case_seed, out_dir)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(build, range(n_cases)))
    else:
        entries = [build(index) for index in range(n_cases)]

    manifest = DatasetManifest(seed=seed, band_mix=proportions, phantom=config, cases=entries,
                               preset=preset, root=out_dir)
    manifest.save(out_dir / MANIFEST_NAME)
    logger.info("Generated %d cases (%s) in %s", n_cases,
                ', '.join(f'{b.value}={c}' for b, c in zip(BAND_ORDER, counts)), out_dir)
    return manifest


def load_case(entry: CaseEntry, root: Union[str, Path], pixel_spacing_mm: float = 0.02,
              frame_spacing_mm: float = 3.0) -> PhantomCase:
    """Read a case's frames and masks back from disk."""
    root = Path(root)

    def stack(paths: Sequence[str]) -> np.ndarray:
        return np.stack([read_pgm(root / rel) for rel in paths])

    eem = stack(entry.eem_masks) > 127
    lumen = stack(entry.lumen_masks) > 127
    return PhantomCase(
        case_id=entry.case_id,
        band=entry.band,
        frames=uint8_to_frame(stack(entry.frames)),
        eem_masks=eem,
        lumen_masks=lumen,
        plaque_masks=stack(entry.plaque_masks) > 127,
        pixel_spacing_mm=pixel_spacing_mm,
        frame_spacing_mm=frame_spacing_mm,
    )


def load_manifest_cases(manifest: DatasetManifest,
                        case_ids: Optional[Sequence[str]] = None) -> dict[str, PhantomCase]:
    if manifest.root is None:
        raise ConfigError("manifest has no root directory")
    wanted = manifest.case_ids if case_ids is None else list(case_ids)
    return {
        case_id: load_case(manifest.entry(case_id), manifest.root,
                           manifest.pixel_spacing_mm, manifest.frame_spacing_mm)
        for case_id in wanted
    }


def partition_clients(cases: Union[DatasetManifest, Sequence[CaseEntry]], n_clients: int,
                      mode: str = 'iid') -> list[list[CaseEntry]]:
    """
    Split cases into disjoint per-client lists.

    ``iid`` deals band-sorted cases round-robin so every client sees a similar
    band mix; ``by_band`` hands out contiguous band-sorted chunks. Each client's
    list keeps the input order, so one client gets the input unchanged.

    Raises:
        PartitionError: n_clients < 1, more clients than cases, or unknown mode
    """
    entries = list(cases.cases if isinstance(cases, DatasetManifest) else cases)
    if n_clients < 1 or n_clients > len(entries):
        raise PartitionError(f"cannot split {len(entries)} cases across {n_clients} clients")
    position = {entry.case_id: i for i, entry in enumerate(entries)}
    ordered = sorted(entries, key=lambda e: (BAND_ORDER.index(e.band), e.case_id))
    buckets: list[list[CaseEntry]] = [[] for _ in range(n_clients)]
    if mode == 'iid':
        for i, entry in enumerate(ordered):
            buckets[i % n_clients].append(entry)
    elif mode == 'by_band':
        size, extra = divmod(len(ordered), n_clients)
        start = 0
        for client in range(n_clients):
            stop = start + size + (1 if client < extra else 0)
            buckets[client] = ordered[start:stop]
            start = stop
    else:
        raise PartitionError(f"unknown partition mode {mode!r}")
    return [sorted(bucket, key=lambda e: position[e.case_id]) for bucket in buckets]
