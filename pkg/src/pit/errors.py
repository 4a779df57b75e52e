"""Exception hierarchy shared by every module in the package."""


class PitError(Exception):
    """Base class for all errors raised by this package."""


class LinalgError(PitError):
    pass


class RankDeficient(LinalgError):
    pass


class NoConvergence(LinalgError):
    pass


class NotPositiveDefinite(LinalgError):
    pass


class SingularTriangular(LinalgError):
    pass


class DimensionMismatch(LinalgError, ValueError):
    pass


class ShapeMismatch(PitError, ValueError):
    pass


class BackwardError(PitError):
    """Backward pass misuse (replaying a consumed tape, wrong tape, ...)."""


class BackwardWithoutForward(BackwardError):
    pass


class TokenOutOfRange(PitError, IndexError):
    pass


class ContextOverflow(PitError, ValueError):
    pass


class NonFiniteLoss(PitError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class ConfigError(PitError, ValueError):
    pass


class CorpusNotFound(PitError, FileNotFoundError):
    pass


class FormatError(PitError, ValueError):
    pass


class HeadOnlyCheckpoint(PitError):
    pass
