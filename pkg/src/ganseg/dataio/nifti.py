"""Reader for the uncompressed single-file NIfTI-1 (``n+1``) subset.

Supported: little-endian, datatype uint8 (2), int16 (4) or float32 (16),
3-D volumes (trailing singleton dims allowed). Voxels are stored with x
varying fastest, so payloads are reshaped in Fortran order.
"""
from __future__ import annotations

import struct

import numpy as np

from .types import Volume

HEADER_SIZE = 348
_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_DTYPE_NAMES = {2: "uint8", 4: "int16", 16: "float32"}


class NiftiError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


class NiftiHeaderError(NiftiError):
    pass


class NiftiMagicError(NiftiError):
    pass


class NiftiDtypeError(NiftiError):
    pass


class NiftiTruncatedError(NiftiError):
    def __init__(self, expected: int, actual: int, offset: int):
        self.expected, self.actual = expected, actual
        super().__init__(f"voxel payload truncated: expected {expected} bytes, found {actual}", offset)


def parse_nifti(blob: bytes, source: str = "") -> Volume:
    if len(blob) < HEADER_SIZE:
        raise NiftiTruncatedError(HEADER_SIZE, len(blob), 0)
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", blob, 0)[0] == HEADER_SIZE:
            raise NiftiHeaderError("sizeof_hdr indicates a big-endian file, which is unsupported", 0)
        raise NiftiHeaderError(f"sizeof_hdr must be 348, got {sizeof_hdr}", 0)
    magic = blob[344:348]
    if magic != b"n+1\x00":
        raise NiftiMagicError(f"magic must be b'n+1\\x00', got {magic!r}", 344)
    dim = struct.unpack_from("<8h", blob, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiHeaderError(f"dim[0] must be in 1..7, got {ndim}", 40)
    shape = list(dim[1 : 1 + ndim])
    if any(s < 1 for s in shape):
        raise NiftiHeaderError(f"non-positive extent in dim {shape}", 42)
    while len(shape) > 3 and shape[-1] == 1:
        shape.pop()
    if len(shape) > 3:
        raise NiftiHeaderError(f"only 3-D volumes are supported, got dims {shape}", 40)
    shape += [1] * (3 - len(shape))
    (datatype,) = struct.unpack_from("<h", blob, 70)
    if datatype not in _DTYPES:
        raise NiftiDtypeError(f"unsupported datatype code {datatype}", 70)
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise NiftiHeaderError(f"vox_offset {vox_offset} lies inside the header", 108)
    dtype = _DTYPES[datatype]
    expected = int(np.prod(shape)) * dtype.itemsize
    available = max(len(blob) - offset, 0)
    if available < expected:
        raise NiftiTruncatedError(expected, available, offset)
    data = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    header = {
        "dim": list(dim),
        "datatype": datatype,
        "bitpix": struct.unpack_from("<h", blob, 72)[0],
        "pixdim": list(struct.unpack_from("<8f", blob, 76)),
        "vox_offset": vox_offset,
        "scl_slope": struct.unpack_from("<f", blob, 112)[0],
        "scl_inter": struct.unpack_from("<f", blob, 116)[0],
        "qform_code": struct.unpack_from("<h", blob, 252)[0],
        "sform_code": struct.unpack_from("<h", blob, 254)[0],
        "orientation": blob[252:344].hex(),
    }
    return Volume(np.ascontiguousarray(data), source=source, dtype_tag=_DTYPE_NAMES[datatype], header=header)


def read_nifti(path) -> Volume:
    with open(path, "rb") as fh:
        return parse_nifti(fh.read(), source=str(path))
