"""Exception types shared across the package.

The CLI maps these onto its exit-code contract, so solver code should
raise them rather than bare ValueError/RuntimeError where the failure
mode is one the contract names.
"""


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class NonCoerciveError(ValueError):
    """Elliptic operator L + c*I is not positive definite (exit code 3)."""


class DivergenceError(RuntimeError):
    """A time integration produced non-finite or blown-up state (exit code 3)."""


class CGError(RuntimeError):
    """Conjugate gradient failed to reach tolerance (exit code 4)."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class NonContractionError(RuntimeError):
    """Fixed-point iteration is not contracting (exit code 5)."""
