"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or extents are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class ContractError(RuntimeError):
    """A caller violated an operation's contract (e.g. non-scalar loss)."""


class DecodeError(RuntimeError):
    """An image file could not be read or has an unsupported format."""


class CorpusError(RuntimeError):
    """A dataset directory is missing classes or contains no usable images."""


class MetricError(ValueError):
    """A metric cannot be computed from the given inputs (e.g. single-class AUC)."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or does not match the expected geometry."""
