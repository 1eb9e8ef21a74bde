"""
Utility functions shared across fedseg.
"""

from contextlib import contextmanager
import logging
from pathlib import Path
import platform
import time
from typing import Iterator, Union
import zlib

import numpy as np
from PIL import Image

from fedseg.errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)


def derive_seed(*keys: Union[int, str]) -> int:
    """
    Derive a 63-bit seed from a tuple of integer or string keys.

    Strings are folded through CRC32 so the result does not depend on
    Python's per-process hash salt.

    Args:
        keys: Seed components, e.g. (base_seed, 'shuffle', client_id, round)

    Returns:
        Non-negative integer usable with numpy.random.default_rng
    """
    entropy = []
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode('utf-8')))
        else:
            value = int(key)
            if value < 0:
                raise ConfigError(f"seed components must be non-negative, got {value}")
            entropy.append(value)
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def parse_host_port(value: str) -> tuple[str, int]:
    """
    Parse 'host:port' into a tuple.

    Args:
        value: Address string such as '127.0.0.1:8765'

    Returns:
        (host, port)

    Raises:
        ConfigError: If the port is missing or not an integer in 0..65535
    """
    host, sep, port = value.rpartition(':')
    if not sep or not host:
        raise ConfigError(f"expected host:port, got {value!r}")
    try:
        port_num = int(port)
    except ValueError:
        raise ConfigError(f"port is not an integer in {value!r}") from None
    if not 0 <= port_num <= 65535:
        raise ConfigError(f"port out of range in {value!r}")
    return host, port_num


def write_pgm(path: Union[str, Path], array: np.ndarray) -> Path:
    """Write an 8-bit grayscale image as binary PGM."""
    if array.ndim != 2:
        raise ShapeMismatchError(f"PGM images must be 2-D, got shape {array.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format='PPM')
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read an 8-bit grayscale PGM into a uint8 array."""
    with Image.open(path) as image:
        return np.asarray(image.convert('L'), dtype=np.uint8).copy()


def frame_to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)


def mask_to_uint8(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 255, 0).astype(np.uint8)


@contextmanager
def timed(label: str, sink: dict) -> Iterator[None]:
    """Record the wall time of the block, in seconds, under ``sink[label]``."""
    start = time.perf_counter()
    try:
        yield
    finally:
        sink[label] = sink.get(label, 0.0) + time.perf_counter() - start
        logger.debug("%s took %.3fs", label, sink[label])


def package_versions() -> dict[str, str]:
    """Versions of the interpreter and numeric stack, for run metadata."""
    import matplotlib
    import pandas
    import PIL
    import scipy

    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pandas': pandas.__version__,
        'matplotlib': matplotlib.__version__,
        'pillow': PIL.__version__,
    }
