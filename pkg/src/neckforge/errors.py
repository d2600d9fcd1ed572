"""Exception hierarchy shared by all modules."""


class NeckforgeError(Exception):
    """Base class for construction and verification failures."""


class NoSignChange(NeckforgeError):
    pass


class NoConvergence(NeckforgeError):
    pass


class ToleranceNotMet(NeckforgeError):
    pass


class GridTooCoarse(NeckforgeError):
    pass


class GridMismatch(NeckforgeError):
    pass


class DomainError(NeckforgeError, ValueError):
    pass


class NewtonDiverged(NeckforgeError):
    pass


class NoSolution(NeckforgeError):
    """Requested height exceeds the maximal attainable height."""

    def __init__(self, message, h_max):
        super().__init__(message)
        self.h_max = h_max


class UnsupportedDimension(NeckforgeError):
    pass


class NeckUnsolvable(NeckforgeError):
    pass


class BasePositivityFailed(NeckforgeError):
    pass


class ProjectionAmbiguous(NeckforgeError):
    pass


class NonVanishingAtZero(NeckforgeError):
    pass


class FormUndefined(NeckforgeError):
    pass


class WidthCollapse(NeckforgeError):
    pass


class StageUnresolvable(NeckforgeError):
    pass


class ConfigInvalid(NeckforgeError):
    pass


class SupportUnresolved(NeckforgeError):
    pass


class ScaleUnresolved(NeckforgeError):
    pass


class InsufficientStages(NeckforgeError):
    pass
