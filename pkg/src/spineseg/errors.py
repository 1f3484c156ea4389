"""Exception types shared across the pipeline."""


class SpineSegError(Exception):
    """Base class for all spineseg errors."""


class DataError(SpineSegError):
    """Malformed, inconsistent, or out-of-range input data."""


class ConfigError(SpineSegError):
    """Invalid run configuration (file or field values)."""


class DivergenceError(SpineSegError):
    """Training produced a non-finite loss."""
