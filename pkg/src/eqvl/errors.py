"""Exception hierarchy shared across the package."""


class EqvlError(Exception):
    """Base class for all package errors."""


class DataIntegrityError(EqvlError, ValueError):
    """Input field contains NaN/Inf or otherwise violates a data invariant."""


class DimensionError(EqvlError, ValueError):
    """Arrays that must share a shape do not."""


class GenerationError(EqvlError):
    pass


class SolverError(EqvlError):
    """Spectral solver failed to converge; ``residual`` is the last equilibrium residual."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class NormalizationError(EqvlError, ValueError):
    pass


class DatasetFormatError(EqvlError):
    """Base for dataset file parse failures."""


class MalformedHeaderError(DatasetFormatError):
    pass


class ShapeMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class CheckpointFormatError(EqvlError):
    pass


class AutogradError(EqvlError, RuntimeError):
    """Misuse of the differentiation tape (e.g. backward on a leaf)."""


class NonFiniteError(EqvlError, FloatingPointError):
    """A NaN/Inf appeared in a forward value, gradient, or loss term."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(message)
        self.where = where


class ShapeError(EqvlError, ValueError):
    pass


class TrainingError(NonFiniteError):
    """Optimizer received non-finite gradients for ``where`` (a parameter name)."""


class LossError(NonFiniteError):
    """A loss term evaluated to a non-finite value; ``where`` names the term."""


class InsufficientDataError(EqvlError, ValueError):
    pass


class UsageError(EqvlError, ValueError):
    pass
