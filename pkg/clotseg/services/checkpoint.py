"""CSCK checkpoint container.

Layout: ``CSCK``, u32 version, u32 snapshot length, UTF-8 ``key=value`` snapshot, u32 record
count, then per record a u16 name length, the UTF-8 name, a u64 payload length and a CSTN
payload. Records and snapshot keys are sorted so identical state always gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from clotseg.config.settings import Settings, flatten_settings, settings_from_flat
from clotseg.core.errors import CheckpointFormatError, CstnFormatError
from clotseg.core.logger import get_logger
from clotseg.tensor.io import decode_array, encode_array

logger = get_logger(__name__)

MAGIC = b"CSCK"
VERSION = 1
META_PREFIX = "meta."
PARAM, MOMENT1, MOMENT2, LANDMARK = "param/", "adam_m/", "adam_v/", "landmark/"


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    epoch: int = 0
    adam_t: int = 0
    moment1: Dict[str, np.ndarray] = field(default_factory=dict)
    moment2: Dict[str, np.ndarray] = field(default_factory=dict)
    landmarks: Dict[str, np.ndarray] = field(default_factory=dict)
    config: Dict[str, str] = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def capture(
        cls,
        params: Dict[str, np.ndarray],
        settings: Settings,
        *,
        epoch: int,
        adam_t: int = 0,
        moment1: Optional[Dict[str, np.ndarray]] = None,
        moment2: Optional[Dict[str, np.ndarray]] = None,
        landmarks: Optional[Dict[str, np.ndarray]] = None,
        rng: Optional[np.random.Generator] = None,
        adam_hyper: Optional[Dict[str, float]] = None,
    ) -> "Checkpoint":
        meta: Dict[str, str] = {"seed": str(settings.resolved_seed)}
        if rng is not None:
            meta["rng_state"] = json.dumps(rng.bit_generator.state, sort_keys=True)
        for key, value in (adam_hyper or {}).items():
            meta[f"adam_{key}"] = repr(float(value))
        return cls(
            params={k: v.copy() for k, v in params.items()},
            epoch=epoch,
            adam_t=adam_t,
            moment1={k: v.copy() for k, v in (moment1 or {}).items()},
            moment2={k: v.copy() for k, v in (moment2 or {}).items()},
            landmarks={k: np.asarray(v, dtype=np.float64) for k, v in (landmarks or {}).items()},
            config=flatten_settings(settings),
            meta=meta,
        )

    def settings(self) -> Settings:
        return settings_from_flat(self.config)

    def restore_rng(self) -> Optional[np.random.Generator]:
        raw = self.meta.get("rng_state")
        if raw is None:
            return None
        state = json.loads(raw)
        rng = np.random.Generator(getattr(np.random, state["bit_generator"])())
        rng.bit_generator.state = state
        return rng


def _snapshot(ckpt: Checkpoint) -> bytes:
    lines = dict(ckpt.config)
    lines.update({f"{META_PREFIX}{key}": value for key, value in ckpt.meta.items()})
    for key, value in lines.items():
        if "\n" in key or "\n" in value or "=" in key:
            raise CheckpointFormatError(f"Snapshot entry {key!r} cannot be written as one key=value line")
    return "".join(f"{key}={lines[key]}\n" for key in sorted(lines)).encode("utf-8")


def _records(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    records: Dict[str, np.ndarray] = {
        "epoch": np.array(float(ckpt.epoch)),
        "adam_t": np.array(float(ckpt.adam_t)),
    }
    for prefix, group in ((PARAM, ckpt.params), (MOMENT1, ckpt.moment1), (MOMENT2, ckpt.moment2), (LANDMARK, ckpt.landmarks)):
        records.update({f"{prefix}{name}": array for name, array in group.items()})
    return records


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    snapshot = _snapshot(ckpt)
    records = _records(ckpt)
    parts = [MAGIC, struct.pack("<II", VERSION, len(snapshot)), snapshot, struct.pack("<I", len(records))]
    for name in sorted(records):
        raw_name = name.encode("utf-8")
        payload = encode_array(records[name])
        parts.append(struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<Q", len(payload)) + payload)
    return b"".join(parts)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    def take(offset: int, size: int, what: str) -> bytes:
        if offset + size > len(payload):
            raise CheckpointFormatError(f"{source}: truncated while reading {what}")
        return payload[offset : offset + size]

    if take(0, 4, "magic") != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {payload[:4]!r}, expected {MAGIC!r}")
    version, snap_len = struct.unpack("<II", take(4, 8, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported checkpoint version {version}")
    offset = 12
    try:
        text = take(offset, snap_len, "config snapshot").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"{source}: config snapshot is not UTF-8") from exc
    offset += snap_len
    config: Dict[str, str] = {}
    meta: Dict[str, str] = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"{source}: malformed snapshot line {line!r}")
        if key.startswith(META_PREFIX):
            meta[key[len(META_PREFIX) :]] = value
        else:
            config[key] = value
    (count,) = struct.unpack("<I", take(offset, 4, "record count"))
    offset += 4
    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(offset, 2, "record name length"))
        offset += 2
        name = take(offset, name_len, "record name").decode("utf-8")
        offset += name_len
        (size,) = struct.unpack("<Q", take(offset, 8, f"length of {name}"))
        offset += 8
        try:
            records[name] = decode_array(take(offset, size, f"record {name}"))
        except CstnFormatError as exc:
            raise CheckpointFormatError(f"{source}: record {name}: {exc}") from exc
        offset += size
    if offset != len(payload):
        raise CheckpointFormatError(f"{source}: {len(payload) - offset} trailing bytes")

    def group(prefix: str) -> Dict[str, np.ndarray]:
        return {name[len(prefix) :]: array for name, array in records.items() if name.startswith(prefix)}

    if "epoch" not in records:
        raise CheckpointFormatError(f"{source}: missing epoch record")
    return Checkpoint(
        params=group(PARAM),
        epoch=int(records["epoch"]),
        adam_t=int(records.get("adam_t", np.array(0.0))),
        moment1=group(MOMENT1),
        moment2=group(MOMENT2),
        landmarks=group(LANDMARK),
        config=config,
        meta=meta,
    )


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)
    logger.info("Saved checkpoint %s (epoch %d)", path, ckpt.epoch)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), source=str(path))


__all__ = ["Checkpoint", "decode_checkpoint", "encode_checkpoint", "load_checkpoint", "save_checkpoint"]
