"""Exception types shared across the package."""


class FewshotError(Exception):
    """Base class for all package errors."""


class DimensionError(FewshotError):
    """A tensor argument has an incompatible shape or dimension."""


class DegenerateBatchError(DimensionError):
    """Batch statistics were requested over fewer than two elements."""


class ContractError(FewshotError):
    """An operation was called outside its documented contract."""


class ConfigError(FewshotError):
    """A model or run configuration is internally inconsistent."""


class DatasetError(FewshotError):
    """A dataset does not satisfy the structural requirements."""


class PnmParseError(DatasetError):
    """A PGM/PPM file could not be parsed; the message names the file."""


class CheckpointError(FewshotError):
    """A checkpoint file failed validation on load."""


class TrainingDivergedError(FewshotError):
    """Training produced a non-finite loss and was aborted."""
