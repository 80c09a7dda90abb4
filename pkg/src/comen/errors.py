"""Exception types shared across the package."""


class ComenError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ComenError, ValueError):
    """Operands do not conform for the requested operation."""


class DomainError(ComenError, ValueError):
    """Math-domain violation (log of a non-positive input, sqrt of a negative)."""


class NonScalarLossError(ComenError, ValueError):
    """backward() requires a scalar loss tensor."""


class DetachedTensorError(ComenError, ValueError):
    """backward() called on a tensor that carries no recorded graph."""


class InvalidDimensionError(ComenError, ValueError):
    """Benchmark generation called with unusable dimensions."""


class FileFormatError(ComenError, ValueError):
    """Base class for dataset/checkpoint serialization failures."""


class MalformedHeaderError(FileFormatError):
    """Bad magic, version, or impossible header fields."""


class TruncatedPayloadError(FileFormatError):
    """File ends before the declared payload is complete."""


class ChecksumError(FileFormatError):
    """Payload bytes do not match the stored CRC32."""


class EmptySpatialError(ComenError, ValueError):
    """Channel statistics over an empty spatial extent."""


class InsufficientBatchError(ComenError, ValueError):
    """Train-mode normalization needs at least two samples."""


class EmptyClusterError(ComenError, RuntimeError):
    """k-means produced an empty cluster on every re-seed attempt."""


class LabelRangeError(ComenError, ValueError):
    """A class label lies outside [0, K)."""


class ZeroNormNodeError(ComenError, ValueError):
    """Adjacency construction received a zero-norm node row."""


class DivergenceError(ComenError, RuntimeError):
    """Training loss became non-finite."""
