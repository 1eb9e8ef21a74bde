"""
Exception hierarchy for fedseg.

Validation failures also subclass ValueError so callers that only care about
"bad input" can keep catching the builtin.
"""


class FedSegError(Exception):
    """Base class for every error raised by fedseg."""


class ShapeMismatchError(FedSegError, ValueError):
    """Tensor, mask or parameter layouts disagree."""


class NonFiniteError(FedSegError, ValueError):
    """A tensor or gradient contains NaN or Inf."""


class ConfigError(FedSegError, ValueError):
    """A configuration value is out of range or inconsistent."""


class GeometryError(FedSegError, ValueError):
    """Phantom geometry violates lumen-inside-EEM containment or image bounds."""


class BandUnreachableError(FedSegError):
    """A phantom case could not be generated inside its requested burden band."""


class StaleCacheError(FedSegError):
    """An activation cache no longer matches the model parameters."""


class EmptyDatasetError(FedSegError, ValueError):
    """A client or experiment received no frames."""


class PartitionError(FedSegError, ValueError):
    """Cases cannot be split into the requested partitions."""


class WeightFileError(FedSegError):
    """An IVWT weight blob is malformed."""


class FrameError(FedSegError):
    """A transport frame failed structural or checksum validation."""


class ProtocolError(FedSegError):
    """A peer sent a message that is illegal in the current session phase."""


class HandshakeTimeoutError(FedSegError):
    """Not every client joined before the handshake deadline."""


class DuplicateClientError(ProtocolError):
    """Two sessions announced the same client id."""


class RoundAbortedError(FedSegError):
    """A federated round was aborted; no partial aggregation happened."""
