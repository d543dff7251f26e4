"""Binary dataset container.

Layout (little-endian)::

    magic          4 bytes  b"GSDS"
    version        uint16   (1)
    reserved       uint16
    manifest_len   uint32   followed by canonical UTF-8 JSON
    n, h, w        3 x uint32
    sample table   n x {id_len uint16, id bytes, z int32, member int32}
    images         n*4*h*w float32
    annotations    n*h*w uint8
    crc32          uint32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .types import SliceDataset

MAGIC = b"GSDS"
VERSION = 1


class ContainerError(ValueError):
    pass


class ContainerVersionError(ContainerError):
    pass


class ContainerChecksumError(ContainerError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_dataset(ds: SliceDataset) -> bytes:
    n = len(ds)
    h, w = ds.spatial_shape
    manifest = canonical_json(ds.manifest).encode("utf-8")
    parts = [MAGIC, struct.pack("<HHI", VERSION, 0, len(manifest)), manifest, struct.pack("<III", n, h, w)]
    for sid, z, m in zip(ds.subject_ids, ds.z, ds.member):
        raw = sid.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<ii", int(z), int(m)))
    parts.append(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(ds.annotations, dtype=np.uint8).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_dataset(blob: bytes) -> SliceDataset:
    if len(blob) < 28 or blob[:4] != MAGIC:
        raise ContainerError("not a dataset container (bad magic)")
    version, _, mlen = struct.unpack_from("<HHI", blob, 4)
    if version != VERSION:
        raise ContainerVersionError(f"dataset container version {version}, expected {VERSION}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ContainerChecksumError("dataset container checksum mismatch")
    pos = 12
    manifest = json.loads(body[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    n, h, w = struct.unpack_from("<III", body, pos)
    pos += 12
    ids, zs, members = [], [], []
    for _ in range(n):
        (ilen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        ids.append(body[pos : pos + ilen].decode("utf-8"))
        pos += ilen
        z, m = struct.unpack_from("<ii", body, pos)
        pos += 8
        zs.append(z)
        members.append(m)
    n_img = n * 4 * h * w
    images = np.frombuffer(body, dtype="<f4", count=n_img, offset=pos).reshape(n, 4, h, w).astype(np.float32)
    pos += 4 * n_img
    annotations = np.frombuffer(body, dtype=np.uint8, count=n * h * w, offset=pos).reshape(n, h, w).copy()
    pos += n * h * w
    if pos != len(body):
        raise ContainerError(f"{len(body) - pos} unexpected trailing bytes")
    return SliceDataset(images, annotations, ids, zs, members, manifest)


def write_dataset(ds: SliceDataset, path, manifest_json: bool = True) -> None:
    """Write the container and, alongside it, the manifest as readable JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_dataset(ds))
    tmp.replace(path)
    if manifest_json:
        path.with_suffix(".manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> SliceDataset:
    return decode_dataset(Path(path).read_bytes())
