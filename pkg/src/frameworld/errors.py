"""Exception types shared across the package."""


class FrameworldError(Exception):
    """Base class for all package-specific errors."""


class InvalidCameraError(FrameworldError, ValueError):
    """Camera intrinsics or extrinsics violate their invariants."""


class SingularProjectionError(FrameworldError, ValueError):
    """A projection matrix is singular or numerically non-invertible."""


class ShapeMismatchError(FrameworldError, ValueError):
    """Array arguments have inconsistent shapes or resolutions."""


class ConfigError(FrameworldError, ValueError):
    """A configuration object or file is invalid."""


class NoValidTrajectoryError(FrameworldError, RuntimeError):
    """Rejection sampling failed to find a collision-free trajectory."""


class CorruptShardError(FrameworldError, RuntimeError):
    """A dataset shard is truncated or malformed.

    ``offset`` is the byte position at which the defect was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(FrameworldError, RuntimeError):
    """A model checkpoint is malformed or shape-incompatible."""


class TrainingDivergedError(FrameworldError, RuntimeError):
    """A training loss or gradient became non-finite.

    ``step`` is the global step at which divergence was detected.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class UndefinedMetricError(FrameworldError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty mask)."""


class ImportBundleError(FrameworldError, ValueError):
    """An imported observation bundle is malformed."""


class SessionCapacityError(FrameworldError, RuntimeError):
    """The server cannot accept more concurrent sessions."""


class FrameGenerationError(FrameworldError, RuntimeError):
    """Frame synthesis failed; session state is preserved."""


class InvalidComparisonError(ConfigError):
    """Runs being compared differ in seed, data, or budget."""


class EmptyMeasurementError(FrameworldError, ValueError):
    """A measurement was requested over zero events."""
