"""Error taxonomy shared across the package.

ConfigurationError covers bad shapes, invalid hyper-parameters and
inconsistent inputs; FormatError covers on-disk container problems;
NumericError covers NaN/Inf escaping a computation. The CLI maps these
onto distinct exit codes.
"""


class ConfigurationError(ValueError):
    """Invalid configuration: shape mismatch, bad hyper-parameter, etc."""


class FormatError(ValueError):
    """Malformed or truncated on-disk data (MVOL file, checkpoint)."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf from finite inputs."""
