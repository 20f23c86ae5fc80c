"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage/configuration problems
exit 2, verification failures exit 1 and numeric divergence exits 3.
"""


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with an operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ConfigError(ValueError):
    """A run configuration is malformed (unknown keys, bad values)."""


class FormatError(ValueError):
    """A binary file failed to parse; the message carries a byte offset."""
