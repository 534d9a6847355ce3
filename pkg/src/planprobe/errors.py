"""Exception taxonomy shared by all planprobe modules.

The CLI maps these onto process exit codes: ConfigError and UsageError
exit 2, DataError subclasses exit 3, NumericError exits 4.
"""


class PlanprobeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PlanprobeError):
    """Invalid configuration; message names the offending field."""


class UsageError(PlanprobeError):
    """API called outside its contract (e.g. stepping a finished env)."""


class ShapeError(PlanprobeError):
    """Tensor shape mismatch; message carries both shapes."""


class DomainError(PlanprobeError):
    """Scalar argument outside its mathematical domain."""


class NumericError(PlanprobeError):
    """NaN/Inf encountered where finite values are required."""


class DataError(PlanprobeError):
    """Problem with on-disk data (replays, checkpoints, metrics)."""


class CompatibilityError(DataError):
    """File readable but incompatible (schema version, env hash, shapes)."""


class IntegrityError(DataError):
    """File corrupt: checksum mismatch or structurally inconsistent."""


class DegenerateDataError(DataError):
    """Evaluation data cannot support the requested statistic."""
