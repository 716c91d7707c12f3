"""Exception types shared across the package."""


class GpeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GpeError):
    """Operand shapes are incompatible."""


class ConfigurationError(GpeError):
    """A parameter value is outside its legal range."""


class NumericError(GpeError):
    """A computation produced a non-finite value."""


class InvariantError(GpeError):
    """An internal structural invariant was violated."""


class ParseError(GpeError):
    """Malformed input text or bytes; message carries the offending location."""


class GenerationError(GpeError):
    """A synthetic sample could not be generated under the given constraints."""


class EvaluationError(GpeError):
    """A metric is undefined for the given inputs."""
