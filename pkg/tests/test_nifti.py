import gzip
import struct

import numpy as np
import pytest
from niftiwriter import nifti_bytes, write_nifti

from ganseg.dataio import (
    MissingModalityError,
    NiftiDtypeError,
    NiftiHeaderError,
    NiftiMagicError,
    NiftiTruncatedError,
    parse_nifti,
    read_nifti,
    read_subject_dir,
)


@pytest.mark.parametrize("dtype", ["uint8", "int16", "float32"])
def test_round_trip_through_independent_writer(dtype, rng):
    data = (rng.uniform(0, 100, size=(5, 4, 3))).astype(dtype)
    vol = parse_nifti(nifti_bytes(data))
    np.testing.assert_array_equal(vol.data, data)
    assert vol.dims == (5, 4, 3)
    assert vol.dtype_tag == dtype


def test_payload_is_x_fastest():
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    blob = nifti_bytes(data)
    first = struct.unpack_from("<3h", blob, 352)
    # (x=0,y=0,z=0), (x=1,y=0,z=0), (x=0,y=1,z=0)
    assert first == (data[0, 0, 0], data[1, 0, 0], data[0, 1, 0])
    np.testing.assert_array_equal(parse_nifti(blob).data, data)


def test_trailing_singleton_dims_and_larger_offset():
    data = np.ones((3, 3, 2, 1), dtype=np.uint8)
    vol = parse_nifti(nifti_bytes(data, vox_offset=400.0))
    assert vol.dims == (3, 3, 2)


def test_bad_magic_reports_offset():
    with pytest.raises(NiftiMagicError) as err:
        parse_nifti(nifti_bytes(np.zeros((2, 2, 2), np.uint8), magic=b"ni1\x00"))
    assert err.value.offset == 344


def test_unsupported_dtype():
    with pytest.raises(NiftiDtypeError) as err:
        parse_nifti(nifti_bytes(np.zeros((2, 2, 2), np.float64)))
    assert err.value.offset == 70


def test_truncated_payload():
    blob = nifti_bytes(np.zeros((4, 4, 4), np.int16))
    with pytest.raises(NiftiTruncatedError) as err:
        parse_nifti(blob[:-10])
    assert (err.value.expected, err.value.actual) == (128, 118)
    with pytest.raises(NiftiTruncatedError):
        parse_nifti(blob[:100])


def test_bad_header_size_and_big_endian():
    blob = bytearray(nifti_bytes(np.zeros((2, 2, 2), np.uint8)))
    struct.pack_into(">i", blob, 0, 348)
    with pytest.raises(NiftiHeaderError, match="big-endian"):
        parse_nifti(bytes(blob))
    struct.pack_into("<i", blob, 0, 540)
    with pytest.raises(NiftiHeaderError, match="348"):
        parse_nifti(bytes(blob))


def test_four_d_volume_rejected():
    with pytest.raises(NiftiHeaderError, match="3-D"):
        parse_nifti(nifti_bytes(np.zeros((2, 2, 2, 2), np.uint8)))


def test_subject_directory(tmp_path, rng):
    d = tmp_path / "S01"
    d.mkdir()
    for m in ("t1", "t1ce", "t2", "flair"):
        write_nifti(d / f"S01_{m}.nii", rng.uniform(0, 500, (6, 6, 4)).astype(np.float32))
    (d / "S01_seg.nii.gz").write_bytes(gzip.compress(nifti_bytes(np.zeros((6, 6, 4), np.uint8))))
    subject = read_subject_dir(d)
    assert subject.subject_id == "S01" and subject.dims == (6, 6, 4)
    (d / "S01_t2.nii").unlink()
    with pytest.raises(MissingModalityError, match="S01.*t2"):
        read_subject_dir(d)


def test_read_nifti_records_source(tmp_path):
    write_nifti(tmp_path / "v.nii", np.zeros((2, 2, 2), np.uint8))
    assert read_nifti(tmp_path / "v.nii").source.endswith("v.nii")
