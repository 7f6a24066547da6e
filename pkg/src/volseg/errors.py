"""Exception types shared across the toolkit."""


class FormatError(ValueError):
    """A file violates its on-disk format contract.

    ``field`` names the offending header field or file section.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class UnsupportedDtypeError(ValueError):
    """A file stores a datatype this toolkit does not handle."""


class ShapeError(ValueError):
    """Array shapes violate an operation's contract."""


class ConfigError(ValueError):
    """A configuration document failed validation.

    ``path`` is the JSON path of the offending key, e.g. ``$.train.max_epoch``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class CheckpointError(RuntimeError):
    """A checkpoint directory is incomplete or incompatible."""


class CoverageError(RuntimeError):
    """Sliding-window fusion left a voxel with zero accumulated weight."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss or gradient."""
