"""Exception types shared across the package."""


class KmreconError(Exception):
    """Base class for all package errors."""


class ValidationError(KmreconError, ValueError):
    """Input violates a documented precondition."""


class ParseError(KmreconError, ValueError):
    """A figure or data file could not be decoded.

    ``offset`` is the byte offset of the offending input when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NoVectorContentError(ParseError):
    def __init__(self, offset: int | None = None):
        super().__init__("no vector content", offset)


class SurvivalError(KmreconError, ValueError):
    """A survival statistic is undefined for the supplied data."""


class MonotoneLikelihoodError(SurvivalError):
    """The Cox partial likelihood has no finite maximiser."""


class ReconstructionError(KmreconError):
    """IPD reconstruction reached an impossible state."""


class ExtractionError(KmreconError):
    """Curve, axis or mark extraction failed."""


class MatchingError(KmreconError, ValueError):
    """A bipartite matching problem is infeasible."""


class InfeasibleConstraintsError(KmreconError, ValueError):
    """Published count constraints cannot be met by any labeling."""
