"""Multi-view 3D tracking of a bird flock: reconstruction, tracking, evaluation, ethograms."""

__version__ = "0.1.0"

from .errors import AviaryTrackError, ConfigError, DataError, DegenerateGeometry, StageIOError  # noqa: E402,F401
