"""Exception types shared across the package.

Every error carries a machine-readable ``category`` that the CLI maps to a
process exit code.
"""


class SvpTtaError(Exception):
    category = "internal"


class ContractViolation(SvpTtaError):
    """A caller broke a documented precondition."""

    category = "contract"


class ConfigError(SvpTtaError):
    """Invalid configuration, CLI flags, or benchmark spec."""

    category = "config"


class DataFormatError(SvpTtaError):
    """Corrupt or truncated on-disk artifact."""

    category = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(SvpTtaError):
    category = "numeric"


class SvdConvergenceError(NumericError):
    """Jacobi sweeps hit the iteration cap before the residual target."""

    def __init__(self, residual, sweeps):
        super().__init__(
            f"SVD did not converge after {sweeps} sweeps "
            f"(largest off-diagonal Gram residual {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


class NotPositiveDefiniteError(NumericError):
    """Cholesky failed even after jitter escalation."""

    def __init__(self, pivot, jitter):
        super().__init__(
            f"matrix is not positive definite (pivot {pivot} failed, "
            f"last jitter tried {jitter:.3e})"
        )
        self.pivot = pivot
        self.jitter = jitter


class TrainingDivergenceError(NumericError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch
