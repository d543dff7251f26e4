"""Minimal NIfTI-1 writer used as an independent fixture source."""
import struct

import numpy as np

CODES = {np.dtype("uint8"): (2, 8), np.dtype("int16"): (4, 16), np.dtype("float32"): (16, 32),
         np.dtype("float64"): (64, 64)}


def nifti_bytes(data: np.ndarray, vox_offset: float = 352.0, magic: bytes = b"n+1\x00",
                datatype: int | None = None) -> bytes:
    data = np.asarray(data)
    code, bitpix = CODES[data.dtype]
    if datatype is not None:
        code = datatype
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    dims = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<f", hdr, 112, 1.0)
    hdr[344:348] = magic
    pad = bytes(int(vox_offset) - 348)
    # x varies fastest on disk
    payload = data.astype(data.dtype.newbyteorder("<")).tobytes(order="F")
    return bytes(hdr) + pad + payload


def write_nifti(path, data, **kw) -> None:
    with open(path, "wb") as fh:
        fh.write(nifti_bytes(data, **kw))
