"""Shared exception types."""


class MolkitError(Exception):
    """Base class for all molkit failures."""


class ContainerError(MolkitError):
    """Array-container I/O failure with a machine-readable code.

    Codes: "malformed-header", "unsupported-version", "payload-mismatch".
    """

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


class ConvergenceError(MolkitError):
    """An iterative solve exhausted its budget; carries the final residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(MolkitError):
    """An iterate became non-finite; carries the iteration index."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(MolkitError):
    """Invalid or unknown experiment-configuration content."""
