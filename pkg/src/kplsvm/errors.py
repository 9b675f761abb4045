"""Exception types shared across the package."""


class KplsvmError(Exception):
    """Base class for all package-specific errors."""


class DataError(KplsvmError):
    """Malformed input data: bad rows, unknown labels, shape mismatches."""


class RepresentationError(KplsvmError):
    """A piece list cannot be expressed as a valid loss specification."""


class InfeasibleError(KplsvmError):
    """The dual QP has an empty feasible set.

    Carries ``certificate``, the width of the gap separating the two
    class-wise attainable intervals of the equality constraint (positive
    exactly when no feasible point exists).
    """

    def __init__(self, message: str, certificate: float = 0.0):
        super().__init__(message)
        self.certificate = certificate


class SolverError(KplsvmError):
    """The QP solver failed to produce a usable solution."""


class TrainingError(KplsvmError):
    """Training preconditions violated or training-time verification failed."""
