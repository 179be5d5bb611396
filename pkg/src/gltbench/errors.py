"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, ProtocolError -> 3,
AcceptanceError -> 4. Everything else is an ordinary crash.
"""


class ConfigError(ValueError):
    """Invalid or missing configuration; message names the offending field."""


class ProtocolError(RuntimeError):
    """Artifact combined with the wrong protocol (e.g. ALT trained on Train-GLT)."""


class NonFiniteError(ArithmeticError):
    """A forward pass or loss produced NaN/Inf; carries epoch context when known."""


class AcceptanceError(AssertionError):
    """A reproduction-run acceptance assertion failed."""
