"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4, anything else under RetSegError -> 1.
"""


class RetSegError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RetSegError):
    """Invalid configuration or parameter values."""


class DataError(RetSegError):
    """Unusable input data: files, shapes, dataset layout."""


class NumericError(RetSegError):
    """Numeric failure: non-finite values or degenerate denominators."""


# image / mask I/O
class UnreadableFile(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class ZeroSizedImage(DataError):
    pass


class ZeroSizedTarget(ConfigError):
    pass


class WriteFailure(DataError):
    pass


# filters
class EmptyImage(DataError):
    pass


class EmptyBank(ConfigError):
    pass


# augmentation / splitting
class PairDimensionMismatch(DataError):
    pass


class CountMismatch(ConfigError):
    pass


# tensor primitives
class ShapeMismatch(DataError):
    pass


class SpatialMismatch(DataError):
    pass


class OddSpatialDim(DataError):
    pass


class NonFiniteValue(NumericError):
    pass


# network assembly / checkpoints
class ConfigInvalid(ConfigError):
    pass


class IndivisibleSpatialDim(DataError):
    pass


class MissingCache(RetSegError):
    pass


class CorruptCheckpoint(DataError):
    pass


class ShapeHeaderMismatch(DataError):
    pass


# training / evaluation
class EmptyTrainSet(DataError):
    pass


class EmptyEvalSet(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


# metrics
class DimensionMismatch(DataError):
    pass


class EmptyConfusion(DataError):
    pass


class ZeroDiceLoss(NumericError):
    pass


# dataset orchestration
class DatasetEmpty(DataError):
    pass


class PairMismatch(DataError):
    pass


class NoRows(DataError):
    pass
