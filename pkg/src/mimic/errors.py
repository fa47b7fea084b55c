"""Exception hierarchy shared by every module.

All domain failures derive from :class:`MimicError`; the CLI maps these to
exit code 1.
"""


class MimicError(Exception):
    """Base class for recoverable domain errors."""


class ZeroLengthPath(MimicError):
    pass


class DimensionMismatch(MimicError):
    pass


class ShapeMismatch(MimicError):
    pass


class LengthMismatch(MimicError):
    pass


class TooShort(MimicError):
    pass


class EmptyInput(MimicError):
    pass


class EmptyDataset(MimicError):
    pass


class TooFewPoints(MimicError):
    pass


class IndivisibleHorizon(MimicError):
    pass


class InsufficientCoverage(MimicError):
    def __init__(self, coverage, c_min):
        super().__init__(f"coverage {coverage:.3f} below threshold {c_min:.3f}")
        self.coverage = coverage
        self.c_min = c_min


class HorizonExceedsPrediction(MimicError):
    pass


class DegenerateSigma(MimicError):
    pass


class Infeasible(MimicError):
    pass


class FormatError(MimicError):
    """Malformed on-disk artifact (bad magic, truncated payload, shape clash)."""
