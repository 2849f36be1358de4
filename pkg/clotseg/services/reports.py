"""Experiment reports: ``<name>-latest.json`` plus a CSV next to it and timestamped history copies."""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from clotseg.core.logger import get_logger

logger = get_logger(__name__)

DEFAULT_REPORT_DIR = Path("evaluation/reports")
TIMESTAMP_FORMAT = "%Y%m%d-%H%M%S"


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Cannot serialise {type(value).__name__} to JSON")


def frame_records(frame: pd.DataFrame) -> list:
    return json.loads(frame.to_json(orient="records"))


def save_report(
    name: str,
    payload: Dict[str, Any],
    frame: pd.DataFrame,
    *,
    report_dir: Path = DEFAULT_REPORT_DIR,
    history_dir: Optional[Path] = None,
    tag: Optional[str] = None,
) -> Dict[str, Any]:
    now = datetime.now(timezone.utc)
    document = {
        "name": name,
        "created_at": now.isoformat().replace("+00:00", "Z"),
        "tag": tag,
        **payload,
        "records": frame_records(frame),
    }
    output_path = report_dir / f"{name}-latest.json"
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(json.dumps(document, indent=2, ensure_ascii=False, default=_jsonable), encoding="utf-8")
    frame.to_csv(output_path.with_suffix(".csv"), index=False, na_rep="NA", encoding="utf-8")

    if history_dir:
        history_dir.mkdir(parents=True, exist_ok=True)
        history_file = history_dir / f"{now.strftime(TIMESTAMP_FORMAT)}-{name}.json"
        history_file.write_text(json.dumps(document, ensure_ascii=False, default=_jsonable), encoding="utf-8")
    logger.info("Report %s written to %s", name, output_path)
    return document


__all__ = ["DEFAULT_REPORT_DIR", "TIMESTAMP_FORMAT", "frame_records", "save_report"]
