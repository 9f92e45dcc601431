"""Exception types shared across the pipeline."""


class EmscopeError(Exception):
    """Base class for all data and configuration errors raised by emscope."""


class TraceFormatError(EmscopeError):
    """A trace stream violates the CSV or binary layout; message names the
    offending byte offset or line number."""


class ConfigError(EmscopeError):
    """Invalid configuration value or config file."""


class DataError(EmscopeError):
    """Structurally valid input that violates an operation's preconditions."""


class CalibrationError(EmscopeError):
    """Noise calibration could not reach the requested oracle accuracy."""
