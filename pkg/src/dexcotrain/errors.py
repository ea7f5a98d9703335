"""Exception types raised across the package."""


class DexError(Exception):
    """Base class for all package errors."""


class DegenerateRot6D(DexError, ValueError):
    pass


class InsufficientPoints(DexError, ValueError):
    pass


class SolverDiverged(DexError, RuntimeError):
    pass


class EmptyEpisode(DexError, ValueError):
    pass


class TooFewSamples(DexError, ValueError):
    pass


class DimensionMismatch(DexError, ValueError):
    pass


class EmbodimentMismatch(DexError, ValueError):
    pass


class JointLimitViolation(DexError, ValueError):
    pass


class NonFiniteTarget(DexError, ValueError):
    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class EpisodeTooShort(DexError, ValueError):
    pass


class EmptyDataset(DexError, ValueError):
    pass


class SchemaMismatch(DexError, ValueError):
    pass


class CorruptFile(DexError, IOError):
    pass


class ShapeMismatch(DexError, ValueError):
    pass


class NonFiniteLoss(DexError, FloatingPointError):
    pass


class ConfigError(DexError, ValueError):
    pass
