"""Exception types shared across the pipeline."""


class AviaryTrackError(Exception):
    """Base class for all package errors."""


class DegenerateGeometry(AviaryTrackError):
    """Raised when a geometric problem has no unique solution."""


class ConfigError(AviaryTrackError):
    """Invalid or inconsistent configuration."""


class DataError(AviaryTrackError):
    """Input data is missing or malformed.

    ``stage`` names the pipeline stage that hit the problem, when known.
    """

    def __init__(self, message, stage=None, path=None):
        self.stage = stage
        self.path = path
        prefix = f"[{stage}] " if stage else ""
        super().__init__(prefix + message)


class StageIOError(DataError):
    """A stage could not read or write one of its files."""


class ManifestError(DataError):
    """WILD manifest entries disagree with their bucket or frame range."""
