"""Exception types shared across the package."""


class SceneIPWError(Exception):
    """Base class for package-specific failures."""


class ConfigError(SceneIPWError):
    """A config file or option set failed validation.

    The message aggregates every problem found, one per line, so a bad
    config can be fixed in a single pass.
    """


class RasterFormatError(SceneIPWError):
    """A raster file is malformed or truncated."""


class CheckpointFormatError(SceneIPWError):
    """A model checkpoint file is malformed or inconsistent."""


class ManifestFormatError(SceneIPWError):
    """A scene manifest CSV is malformed or inconsistent."""


class DegenerateDataError(SceneIPWError):
    """Input data cannot support the requested computation.

    Raised e.g. when an estimator needs both treated and control units
    but one group is empty.
    """


class DivergenceError(SceneIPWError):
    """Training produced a non-finite loss or parameter value."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
