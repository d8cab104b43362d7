"""Exception hierarchy shared by all cdcml modules.

Three top-level categories map onto the CLI's error prefixes and exit
codes: configuration problems, data/validation problems, and numeric
failures during training or checking.
"""


class CdcmlError(Exception):
    """Base class for all package errors."""

    category = "error"


class ConfigError(CdcmlError):
    """Bad configuration: unknown keys, unparsable values, invalid combinations."""

    category = "config"


class DataError(CdcmlError):
    """Bad data: malformed files, constraint violations, missing references."""

    category = "data"


class NumericError(CdcmlError):
    """Numeric failure: non-finite values, diverging training, failed checks."""

    category = "numeric"


class InvalidScaleError(DataError):
    """Degenerate normalization range or non-positive similarity scale."""


class OutOfRangeError(DataError):
    """A raw value lies outside its declared annotation scale."""


class EmptyCorpusError(DataError):
    """An operation that needs items received an empty pool."""


class InfeasibleSplitError(DataError):
    """Requested split ratios leave at least one split empty."""


class InsufficientPoolError(DataError):
    """Fewer candidate images than the pair policy requires per clip."""


class ParseError(DataError):
    """Malformed file content; carries the offending line number."""

    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class DanglingReferenceError(DataError):
    """A pair references an item id absent from the corpus."""


class CheckpointFormatError(DataError):
    """Unknown magic, wrong version, or truncated checkpoint file."""


class ShapeError(DataError):
    """Tensor dimensions do not match the declared or expected shape."""
