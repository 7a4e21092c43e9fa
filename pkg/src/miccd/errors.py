"""Exception hierarchy shared by all pipeline stages."""


class MiccdError(Exception):
    """Base class for every error raised by this package."""


class CycleError(MiccdError, ValueError):
    pass


class TargetNotSink(MiccdError, ValueError):
    pass


class GraphTooLarge(MiccdError, ValueError):
    pass


class LengthMismatch(MiccdError, ValueError):
    pass


class ShapeMismatch(MiccdError, ValueError):
    pass


class GenerationFailed(MiccdError, RuntimeError):
    pass


class ThresholdUnset(MiccdError, RuntimeError):
    pass


class InterventionOnTarget(MiccdError, ValueError):
    pass


class DegenerateComponent(MiccdError, RuntimeError):
    pass


class NonFiniteLoss(MiccdError, FloatingPointError):
    pass


class FactualNotAbnormal(MiccdError, ValueError):
    pass


class EmptyInput(MiccdError, ValueError):
    pass


class ZeroReference(MiccdError, ValueError):
    pass


class NoRelevantItems(MiccdError, ValueError):
    pass


class ZeroVariance(MiccdError, ValueError):
    pass


class ConfigInvalid(MiccdError, ValueError):
    pass


class MissingArtifact(MiccdError, FileNotFoundError):
    pass
