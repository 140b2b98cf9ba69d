"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SindyLoopError(Exception):
    """Base class for every error raised by this package."""


# grammar ---------------------------------------------------------------


class GrammarError(SindyLoopError):
    """A candidate expression or template was rejected by the grammar."""

    reason = "syntax"


class ExprSyntaxError(GrammarError):
    reason = "syntax"


class DisallowedSymbol(GrammarError):
    reason = "disallowed-symbol"


class DisallowedForm(GrammarError):
    reason = "disallowed-form"


class LinearityViolation(DisallowedForm):
    reason = "linearity"


class TooManyTerms(GrammarError):
    reason = "too-many-terms"


class DuplicateFeature(GrammarError):
    reason = "duplicate"


class EvaluationError(SindyLoopError):
    """A feature could not be evaluated at some sample (domain violation)."""

    def __init__(self, message: str, sample: int | None = None, feature: str | None = None):
        super().__init__(message)
        self.sample = sample
        self.feature = feature


class DimensionMismatch(SindyLoopError):
    pass


# regression / metrics ---------------------------------------------------


class InvalidTrajectory(SindyLoopError):
    pass


class EmptyActiveSet(SindyLoopError):
    """STLSQ thresholded every coefficient away."""

    def __init__(self, message: str = "all coefficients thresholded to zero", n_terms: int = 0):
        super().__init__(message)
        self.n_terms = n_terms


class DegenerateVariance(SindyLoopError):
    pass


class DegenerateRange(SindyLoopError):
    pass


# proposers ---------------------------------------------------------------


class ProposerUnavailable(SindyLoopError):
    pass


class MalformedResponse(SindyLoopError):
    pass


# benchmark ---------------------------------------------------------------


class SpecError(SindyLoopError):
    """A system specification file is unreadable or inconsistent."""


class TruthDivergence(SindyLoopError):
    pass


class UnstableConfiguration(SindyLoopError):
    pass
