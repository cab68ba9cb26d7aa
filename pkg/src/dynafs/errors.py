"""Exception hierarchy shared by every stage of the toolkit."""


class DynafsError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DynafsError, ValueError):
    """Invalid configuration value or malformed config file."""


class DataError(DynafsError, ValueError):
    """Malformed or unusable input data."""


class ParseError(DataError):
    """A CSV input is missing a required column or has an unparsable cell."""


class SchemaError(DataError):
    """Events reference a feature that the schema does not declare."""


class ImputationError(DataError):
    """A required feature (or the label) has no observation for a subject."""


class TrainingError(DynafsError, RuntimeError):
    """Numerical failure during model fitting (NaN loss, NaN ratio, ...)."""


class NotConvergedError(DynafsError, RuntimeError):
    """Policy training hit max_steps before the cost target was met."""
