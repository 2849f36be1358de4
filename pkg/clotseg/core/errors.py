"""Exception hierarchy shared by every clotseg module."""

from __future__ import annotations

from typing import Dict, Tuple


class ClotsegError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(ClotsegError, ValueError):
    """Invalid configuration: unknown key, type mismatch or violated constraint."""


class DimensionError(ClotsegError, ValueError):
    pass


class NonFiniteError(ClotsegError, ValueError):
    pass


class GradCheckError(ClotsegError, ValueError):
    pass


class FormatError(ClotsegError, IOError):
    """Binary file does not follow its declared layout."""


class MvolFormatError(FormatError):
    pass


class MvolTruncatedError(MvolFormatError):
    pass


class CstnFormatError(FormatError):
    pass


class CheckpointFormatError(FormatError):
    pass


class PlacementError(ClotsegError, RuntimeError):
    """Phantom blobs could not be placed within the rejection budget."""


class DegenerateVolumeError(ClotsegError, ValueError):
    pass


class CropError(ClotsegError, ValueError):
    pass


class CheckpointMismatchError(ClotsegError, ValueError):
    def __init__(self, diff: Dict[str, Tuple[object, object]]) -> None:
        self.diff = diff
        lines = [f"  {name}: checkpoint={left} model={right}" for name, (left, right) in sorted(diff.items())]
        super().__init__("Checkpoint does not match the model:\n" + "\n".join(lines))


class TrainingDivergedError(ClotsegError, RuntimeError):
    pass
