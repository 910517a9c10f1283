"""Exception types raised across the package.

Every error derives from :class:`DodaError` and from the builtin it is
closest to, so callers may catch either one. Each class carries a default
message so it can be raised bare.
"""


class DodaError(Exception):
    def __init__(self, message="Something went wrong inside doda."):
        self.message = message
        super().__init__(self.message)


class ShapeError(DodaError, ValueError):
    def __init__(self, message="Tensor shapes do not agree"):
        super().__init__(message)


class NonFiniteError(DodaError, FloatingPointError):
    def __init__(self, message="Operation produced NaN or Inf"):
        super().__init__(message)


class GraphError(DodaError, RuntimeError):
    def __init__(self, message="Compute graph cannot be differentiated"):
        super().__init__(message)


class ScheduleError(DodaError, ValueError):
    def __init__(self, message="Timestep outside the noise schedule"):
        super().__init__(message)


class MissingConditionError(DodaError, ValueError):
    def __init__(self, message="A required condition was not supplied"):
        super().__init__(message)


class InvalidBoxError(DodaError, ValueError):
    def __init__(self, message="Bounding box has non-positive extent"):
        super().__init__(message)


class TilingError(DodaError, ValueError):
    def __init__(self, message="Tile is larger than the image"):
        super().__init__(message)


class EmptyPoolError(DodaError, ValueError):
    def __init__(self, message="Reference pool is empty"):
        super().__init__(message)


class EmptyDatasetError(DodaError, ValueError):
    def __init__(self, message="Dataset has no samples"):
        super().__init__(message)


class ZeroNormError(DodaError, ValueError):
    def __init__(self, message="Embedding has zero norm"):
        super().__init__(message)


class NegativeSpectrumError(DodaError, ArithmeticError):
    def __init__(self, message="Covariance product has a negative eigenvalue"):
        super().__init__(message)


class DuplicateImageError(DodaError, ValueError):
    def __init__(self, message="Image id appears more than once"):
        super().__init__(message)


class DivergenceError(DodaError, RuntimeError):
    def __init__(self, message="Training diverged (loss is not finite)"):
        super().__init__(message)


class ConfigError(DodaError, ValueError):
    def __init__(self, message="Invalid run configuration"):
        super().__init__(message)


class VerificationError(DodaError, AssertionError):
    def __init__(self, message="Verification failed"):
        super().__init__(message)
