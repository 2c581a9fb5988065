"""Exception and warning types shared across the package."""


class SoftKIError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(SoftKIError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(SoftKIError):
    """Cholesky failed for every jitter value in the schedule."""


class RankDeficient(SoftKIError):
    """Triangular factor has a diagonal entry below the rank tolerance."""


class SingularTriangular(SoftKIError):
    """Triangular solve hit an exactly-zero diagonal entry."""


class NonPositiveTemperature(SoftKIError):
    """Interpolation temperatures must be strictly positive."""


class TooFewPoints(SoftKIError):
    """Fewer data points than requested centroids."""


class TooLarge(SoftKIError):
    """Input exceeds the dense-path size guardrail."""


class ObjectiveFailed(SoftKIError):
    """Both the exact and fallback objectives produced non-finite results."""


class ParseError(SoftKIError):
    """A CSV cell failed to parse. Carries 1-based row and column."""

    def __init__(self, row: int, col: int, text: str):
        self.row = row
        self.col = col
        self.text = text
        super().__init__(f"row {row}, col {col}: cannot parse {text!r} as a number")


class EmptyFile(SoftKIError):
    """CSV file contains no data rows."""


class ChecksumOrVersionMismatch(SoftKIError):
    """Checkpoint payload failed its checksum or has an unsupported version."""


class CGNotConvergedWarning(UserWarning):
    """Conjugate gradients stopped at max_iters above tolerance."""


class DegenerateColumnWarning(UserWarning):
    """A training column had zero variance; its std was forced to 1."""
