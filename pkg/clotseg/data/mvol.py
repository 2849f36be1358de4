"""MVOL container: little-endian multimodal volume with presence flags and u8 masks.

Header: ``MVOL``, u32 version, u16 modality_count, u16 mask_count, u32 X, Y, Z, f32 spacing[3].
Each modality: u8 name length, UTF-8 name, u8 presence, f32 row-major data. Each mask: u8 name
length, UTF-8 name, u8 row-major data.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from clotseg.core.errors import MvolFormatError, MvolTruncatedError
from clotseg.core.logger import get_logger
from clotseg.models.schemas import Volume

logger = get_logger(__name__)

MAGIC = b"MVOL"
VERSION = 1
_HEADER = struct.Struct("<4sIHHIII3f")
MAX_VOXELS = 2**31 - 1


class _Reader:
    def __init__(self, payload: bytes, source: str) -> None:
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise MvolTruncatedError(f"{self.source}: truncated while reading {what} ({len(self.payload) - self.offset} of {size} bytes left)")
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def name(self) -> str:
        (length,) = self.take(1, "name length")
        try:
            return self.take(length, "channel name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MvolFormatError(f"{self.source}: channel name is not valid UTF-8") from exc


def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 255:
        raise MvolFormatError(f"Channel name {name!r} is longer than 255 bytes")
    return bytes([len(raw)]) + raw


def encode_volume(vol: Volume) -> bytes:
    if len(vol.modalities) > 0xFFFF or len(vol.masks) > 0xFFFF:
        raise MvolFormatError("Too many channels for the MVOL header")
    x, y, z = vol.shape
    parts = [_HEADER.pack(MAGIC, VERSION, len(vol.modalities), len(vol.masks), x, y, z, *vol.spacing)]
    for name, data in vol.modalities.items():
        parts.append(_encode_name(name))
        parts.append(bytes([1 if vol.presence.get(name, True) else 0]))
        parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    for name, mask in vol.masks.items():
        parts.append(_encode_name(name))
        parts.append(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_volume(payload: bytes, source: str = "<bytes>") -> Volume:
    reader = _Reader(payload, source)
    magic, version, n_mod, n_mask, x, y, z, sx, sy, sz = _HEADER.unpack(reader.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise MvolFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise MvolFormatError(f"{source}: unsupported MVOL version {version}")
    voxels = x * y * z
    if voxels > MAX_VOXELS:
        raise MvolFormatError(f"{source}: dimensions {x}x{y}x{z} overflow the supported voxel count")
    if n_mod == 0:
        raise MvolFormatError(f"{source}: a volume needs at least one modality")
    shape: Tuple[int, int, int] = (x, y, z)
    modalities: Dict[str, np.ndarray] = {}
    presence: Dict[str, bool] = {}
    for _ in range(n_mod):
        name = reader.name()
        if name in modalities:
            raise MvolFormatError(f"{source}: duplicate modality channel {name!r}")
        (flag,) = reader.take(1, f"presence of {name}")
        raw = reader.take(4 * voxels, f"data of {name}")
        modalities[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        presence[name] = bool(flag)
    masks: Dict[str, np.ndarray] = {}
    for _ in range(n_mask):
        name = reader.name()
        if name in masks:
            raise MvolFormatError(f"{source}: duplicate mask {name!r}")
        raw = reader.take(voxels, f"mask {name}")
        masks[name] = np.frombuffer(raw, dtype=np.uint8).reshape(shape).astype(bool)
    if reader.offset != len(payload):
        raise MvolFormatError(f"{source}: {len(payload) - reader.offset} trailing bytes after the last channel")
    try:
        return Volume(modalities=modalities, spacing=(float(sx), float(sy), float(sz)), presence=presence, masks=masks)
    except ValueError as exc:
        raise MvolFormatError(f"{source}: {exc}") from exc


def write_mvol(vol: Volume, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_volume(vol))
    logger.debug("Wrote %s (%s, modalities=%s, masks=%s)", path, vol.shape, list(vol.modalities), list(vol.masks))
    return path


def read_mvol(path: Union[str, Path]) -> Volume:
    path = Path(path)
    return decode_volume(path.read_bytes(), source=str(path))


__all__ = ["decode_volume", "encode_volume", "read_mvol", "write_mvol"]
