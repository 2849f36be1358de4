"""CSTN tensor dump codec shared by standalone tensor files and checkpoints.

Layout: magic ``CSTN``, u32 version, u32 rank, u64 dims[rank], then little-endian row-major
values. The value width (4 or 8 bytes) follows from the record length, so a record must be
read with its exact byte extent; empty tensors are stored as float64.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from clotseg.core.errors import CstnFormatError

MAGIC = b"CSTN"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_MAX_RANK = 16


def encode_array(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.float32:
        values = array.astype("<f4", copy=False)
    else:
        values = array.astype("<f8", copy=False)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    return _HEADER.pack(MAGIC, VERSION, array.ndim) + dims + np.ascontiguousarray(values).tobytes()


def decode_array(payload: bytes) -> np.ndarray:
    if len(payload) < _HEADER.size:
        raise CstnFormatError(f"CSTN record truncated: {len(payload)} bytes is shorter than the header")
    magic, version, rank = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise CstnFormatError(f"Bad CSTN magic {magic!r}")
    if version != VERSION:
        raise CstnFormatError(f"Unsupported CSTN version {version}")
    if rank > _MAX_RANK:
        raise CstnFormatError(f"CSTN rank {rank} exceeds the supported maximum {_MAX_RANK}")
    offset = _HEADER.size
    if len(payload) < offset + 8 * rank:
        raise CstnFormatError("CSTN record truncated inside the dimension table")
    shape = struct.unpack_from(f"<{rank}Q", payload, offset)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.uint64)) if rank else 1
    body = len(payload) - offset
    if count == 0:
        if body != 0:
            raise CstnFormatError(f"Empty CSTN tensor carries {body} trailing bytes")
        return np.zeros(shape, dtype=np.float64)
    if body == 4 * count:
        dtype = np.dtype("<f4")
    elif body == 8 * count:
        dtype = np.dtype("<f8")
    else:
        raise CstnFormatError(f"CSTN body of {body} bytes does not hold {count} float32 or float64 values")
    values = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    return values.reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(array: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_array(array))
    return path


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    return decode_array(Path(path).read_bytes())
