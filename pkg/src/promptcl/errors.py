"""Exception types shared across the package."""


class PromptclError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PromptclError):
    """Invalid configuration or invalid run setup."""


class ShapeError(PromptclError):
    """Tensor or matrix dimensions do not match the expected contract."""


class InputError(PromptclError):
    """Malformed or empty runtime input (batches, score maps, traces)."""


class StateError(PromptclError):
    """Operation applied in an invalid lifecycle state."""


class OrderingError(StateError):
    """Task ids added out of sequence."""


class CapacityError(PromptclError):
    """Requested more tasks than the generator can produce distinctly."""


class SchemaError(PromptclError):
    """A structured file violates its record schema."""


class ParseError(PromptclError):
    """A CSV or text artifact could not be parsed."""


class IntegrityError(PromptclError):
    """A checkpoint or store file is corrupt or incomplete."""


class UndefinedMetricError(PromptclError):
    """Metric requested on a matrix too small to define it."""
