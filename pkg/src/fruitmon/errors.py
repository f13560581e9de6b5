"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies instead of bare ValueError.
"""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class ShapeError(ValueError):
    """Array shape or model architecture mismatch."""


class EmptyInputError(ValidationError):
    """An operation that needs at least one point/row received none."""


class PlyParseError(ValueError):
    """Malformed PLY header or payload."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
