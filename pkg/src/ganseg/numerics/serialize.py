"""Binary parameter container.

Layout (all integers little-endian)::

    magic      4 bytes  b"GSPT"
    version    uint16   (currently 1)
    reserved   uint16   (0)
    count      uint32   number of entries
    entries    count x {
                   name_len uint16, name utf-8 bytes,
                   ndim uint8, dims ndim x uint32,
                   payload  prod(dims) x float32
               }
    crc32      uint32   over every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GSPT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode_parameters(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HHI", VERSION, 0, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        if arr.ndim > 255:
            raise CheckpointFormatError(f"{name}: too many dimensions")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_parameters(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not a parameter container (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("parameter container checksum mismatch")
    version, _, count = struct.unpack_from("<HHI", body, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported container version {version}")
    pos = 12
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(body):
            raise CheckpointFormatError(f"entry {name!r} truncated")
        out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(body):
        raise CheckpointFormatError(f"{len(body) - pos} trailing bytes after last entry")
    return out


def save_parameters(path, params: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_parameters(params))
    tmp.replace(path)


def load_parameters(path) -> "OrderedDict[str, np.ndarray]":
    return decode_parameters(Path(path).read_bytes())
