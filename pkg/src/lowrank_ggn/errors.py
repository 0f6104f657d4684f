"""Exception hierarchy shared by all modules."""


class CurvatureError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CurvatureError, ValueError):
    pass


class NonSquareError(ShapeError):
    pass


class DimensionMismatchError(ShapeError):
    pass


class NotSymmetricError(CurvatureError, ValueError):
    pass


class NoConvergenceError(CurvatureError, RuntimeError):
    pass


class UnknownActivationError(CurvatureError, ValueError):
    pass


class UnknownLossError(CurvatureError, ValueError):
    pass


class StaleTraceError(CurvatureError, ValueError):
    """The forward trace does not belong to the network it is used with."""


class BadLayerIndexError(CurvatureError, IndexError):
    pass


class EmptySubsetError(CurvatureError, ValueError):
    pass


class ClippedEigenvalueError(CurvatureError, ValueError):
    """A requested direction lies at or below the clip threshold."""


class NoRetainedDirectionsError(ClippedEigenvalueError):
    pass


class SingularGramSystemError(CurvatureError, RuntimeError):
    pass


class DimensionCapError(CurvatureError, ValueError):
    pass


class ColumnCountMismatchError(ShapeError):
    pass


class NotOrthonormalError(CurvatureError, ValueError):
    pass


class TooFewSamplesError(CurvatureError, ValueError):
    pass


class UnknownReferenceError(CurvatureError, ValueError):
    pass


class ConfigError(CurvatureError, ValueError):
    pass
