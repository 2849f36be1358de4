from __future__ import annotations

from pathlib import Path
from typing import Iterable, List


def list_volumes(directory: Path, pattern: str = "*.mvol") -> List[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"Not a directory: {directory}")
    return sorted(directory.glob(pattern))


def require_paths(paths: Iterable[Path]) -> None:
    missing = [str(path) for path in paths if not path.exists()]
    if missing:
        raise FileNotFoundError(f"Missing input paths: {', '.join(missing)}")
