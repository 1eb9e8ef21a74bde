"""
Named parameter collections and the IVWT weight file format.

IVWT layout (all integers little-endian)::

    b'IVWT' | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 rank | rank x u32 extent | float32 data )
    u32 CRC32 of everything before it
"""

import logging
from pathlib import Path
import struct
from typing import Callable, Iterable, Iterator, Union
import zlib

import numpy as np

from fedseg.errors import ShapeMismatchError, WeightFileError

logger = logging.getLogger(__name__)

IVWT_MAGIC = b'IVWT'
IVWT_VERSION = 1
_PREAMBLE = struct.Struct('<4sII')
_NAME_LEN = struct.Struct('<H')
_RANK = struct.Struct('<B')
_CRC = struct.Struct('<I')

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class ModelParams:
    """Ordered, immutable mapping from tensor name to array.

    Tensors are copied on construction and marked read-only, so a
    ``ModelParams`` can be shared between threads and rounds freely.
    """

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] = ()):
        self._tensors: dict[str, np.ndarray] = {}
        for name, tensor in items:
            if name in self._tensors:
                raise ShapeMismatchError(f"duplicate parameter name {name!r}")
            array = np.array(tensor, copy=True)
            array.setflags(write=False)
            self._tensors[name] = array

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} tensors, {self.param_count} values)"

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    def names(self) -> list[str]:
        return list(self._tensors)

    def layout(self) -> Layout:
        return tuple((name, tuple(t.shape)) for name, t in self._tensors.items())

    @property
    def param_count(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def same_layout(self, other: 'ModelParams') -> bool:
        return self.layout() == other.layout()

    def require_layout(self, other: 'ModelParams', what: str = 'parameters') -> None:
        if not self.same_layout(other):
            raise ShapeMismatchError(f"{what} layout does not match")

    def bit_equal(self, other: 'ModelParams') -> bool:
        """True when layouts match and every tensor has identical bytes."""
        if not self.same_layout(other):
            return False
        return all(
            t.dtype == other[name].dtype and t.tobytes() == other[name].tobytes()
            for name, t in self.items()
        )

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> 'ModelParams':
        return ModelParams((name, fn(name, t)) for name, t in self.items())

    def zeros_like(self) -> 'ModelParams':
        return self.map(lambda _, t: np.zeros_like(t))

    def astype(self, dtype) -> 'ModelParams':
        return self.map(lambda _, t: t.astype(dtype))

    def prefixed(self, prefix: str) -> 'ModelParams':
        return ModelParams((prefix + name, t) for name, t in self.items())

    def subset(self, prefix: str) -> 'ModelParams':
        """Tensors whose name starts with ``prefix``, with the prefix stripped."""
        return ModelParams(
            (name[len(prefix):], t) for name, t in self.items() if name.startswith(prefix)
        )

    @classmethod
    def merge(cls, *parts: 'ModelParams') -> 'ModelParams':
        return cls(item for part in parts for item in part.items())

    def flatten(self) -> np.ndarray:
        """Concatenate every tensor, in layout order, into one vector."""
        if not self._tensors:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([t.ravel() for t in self._tensors.values()])

    @classmethod
    def unflatten(cls, vector: np.ndarray, layout: Layout) -> 'ModelParams':
        expected = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in layout)
        if vector.ndim != 1 or vector.size != expected:
            raise ShapeMismatchError(
                f"vector of size {vector.size} does not fit layout with {expected} values"
            )
        items = []
        offset = 0
        for name, shape in layout:
            size = int(np.prod(shape, dtype=np.int64))
            items.append((name, vector[offset:offset + size].reshape(shape)))
            offset += size
        return cls(items)


def params_to_bytes(params: ModelParams) -> bytes:
    """Serialize to IVWT; values are stored as little-endian float32."""
    parts = [_PREAMBLE.pack(IVWT_MAGIC, IVWT_VERSION, len(params))]
    for name, tensor in params.items():
        encoded = name.encode('utf-8')
        if len(encoded) > 0xFFFF:
            raise WeightFileError(f"parameter name too long: {name[:40]}...")
        if tensor.ndim > 0xFF:
            raise WeightFileError(f"tensor {name!r} has rank {tensor.ndim}")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_RANK.pack(tensor.ndim))
        parts.append(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype='<f4').tobytes())
    body = b''.join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def params_from_bytes(blob: Union[bytes, bytearray, memoryview]) -> ModelParams:
    """Parse an IVWT blob.

    Raises:
        WeightFileError: Bad magic or version, truncation, trailing bytes or
            checksum mismatch.
    """
    blob = bytes(blob)
    if len(blob) < _PREAMBLE.size + _CRC.size:
        raise WeightFileError(f"weight blob truncated ({len(blob)} bytes)")
    body, (crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    magic, version, count = _PREAMBLE.unpack_from(body, 0)
    if magic != IVWT_MAGIC:
        raise WeightFileError(f"bad weight magic {magic!r}")
    if version != IVWT_VERSION:
        raise WeightFileError(f"unsupported weight version {version}")
    if zlib.crc32(body) != crc:
        raise WeightFileError("weight checksum mismatch")

    offset = _PREAMBLE.size
    items = []
    try:
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(body, offset)
            offset += _NAME_LEN.size
            name = body[offset:offset + name_len].decode('utf-8')
            if len(name.encode('utf-8')) != name_len:
                raise WeightFileError("weight blob truncated inside a tensor name")
            offset += name_len
            (rank,) = _RANK.unpack_from(body, offset)
            offset += _RANK.size
            shape = struct.unpack_from(f'<{rank}I', body, offset)
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            end = offset + 4 * size
            if end > len(body):
                raise WeightFileError(f"weight blob truncated inside tensor {name!r}")
            data = np.frombuffer(body, dtype='<f4', count=size, offset=offset)
            items.append((name, data.astype(np.float32).reshape(shape)))
            offset = end
    except struct.error as exc:
        raise WeightFileError(f"weight blob truncated: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise WeightFileError(f"tensor name is not UTF-8: {exc}") from exc
    if offset != len(body):
        raise WeightFileError(f"{len(body) - offset} trailing bytes after last tensor")
    return ModelParams(items)


def save_params(params: ModelParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(params_to_bytes(params))
    logger.info("Wrote %d parameters to %s", params.param_count, path)
    return path


def load_params(path: Union[str, Path]) -> ModelParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read weight file {path}: {exc}") from exc
    return params_from_bytes(blob)
