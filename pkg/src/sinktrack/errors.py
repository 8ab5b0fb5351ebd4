"""Exception hierarchy shared across the runtime."""


class SinkTrackError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SinkTrackError, ValueError):
    pass


class NonFiniteError(SinkTrackError, ValueError):
    pass


class EmptyInputError(SinkTrackError, ValueError):
    pass


class ConfigError(SinkTrackError, ValueError):
    pass


class VocabularyError(SinkTrackError, ValueError):
    pass


class InputError(SinkTrackError, ValueError):
    pass


class CacheError(SinkTrackError, RuntimeError):
    pass


class CapacityError(CacheError):
    pass


class ContractError(SinkTrackError, RuntimeError):
    """An internal routing contract was broken (e.g. dual-track on an unscheduled layer)."""


# Plan validation. Each violated invariant has its own class so callers and
# the CLI can tell them apart.
class PlanError(SinkTrackError, ValueError):
    pass


class UnknownModeError(PlanError):
    pass


class ScheduleError(PlanError):
    pass


class LayerRangeError(ScheduleError):
    pass


class StrengthMissingError(PlanError):
    pass


class StrengthNotAllowedError(PlanError):
    pass


class StrengthRangeError(PlanError):
    pass


class StrengthOrderError(PlanError):
    pass


class SourceFormError(PlanError):
    pass


class InfoSourceError(SinkTrackError, ValueError):
    pass


class TraceError(SinkTrackError, ValueError):
    pass


# Tensor file format
class TensorFileError(SinkTrackError):
    pass


class FormatError(TensorFileError, ValueError):
    pass


class BoundsError(TensorFileError, ValueError):
    pass


class ShapeError(TensorFileError, ValueError):
    pass


class AlignmentError(TensorFileError, ValueError):
    pass


class MissingTensorError(TensorFileError, KeyError):
    pass
