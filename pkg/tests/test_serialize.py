import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from ganseg.numerics import CheckpointFormatError, Conv2d, load_parameters, save_parameters
from ganseg.numerics.serialize import decode_parameters, encode_parameters


def test_encoding_matches_hand_layout():
    blob = encode_parameters({"a": np.array([[1.0, 2.0]], dtype=np.float32)})
    body = (b"GSPT" + struct.pack("<HHI", 1, 0, 1) + struct.pack("<H", 1) + b"a" + bytes([2])
            + struct.pack("<II", 1, 2) + struct.pack("<ff", 1.0, 2.0))
    assert blob == body + struct.pack("<I", zlib.crc32(body))


@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=4),
                              elements=st.floats(-1e6, 1e6, width=32)), max_size=5))
def test_round_trip(params):
    out = decode_parameters(encode_parameters(params))
    assert list(out) == list(params)
    for k in params:
        np.testing.assert_array_equal(out[k], params[k])


def test_corruption_detected():
    blob = bytearray(encode_parameters({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}))
    blob[20] ^= 0xFF
    with pytest.raises(CheckpointFormatError, match="checksum"):
        decode_parameters(bytes(blob))


def test_bad_magic_and_truncation():
    with pytest.raises(CheckpointFormatError, match="magic"):
        decode_parameters(b"XXXX" + bytes(20))
    blob = encode_parameters({"w": np.zeros(4, np.float32)})
    with pytest.raises(CheckpointFormatError):
        decode_parameters(blob[:-6])


def test_module_save_load(tmp_path, rng):
    a = Conv2d(2, 3, 3, rng)
    b = Conv2d(2, 3, 3, np.random.default_rng(99))
    save_parameters(tmp_path / "p.bin", a.state_dict())
    b.load_state_dict(load_parameters(tmp_path / "p.bin"))
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(b.state_dict()[k], v)


def test_load_state_dict_rejects_mismatch(rng):
    layer = Conv2d(2, 3, 3, rng)
    state = layer.state_dict()
    state.pop("bias")
    with pytest.raises(KeyError, match="missing"):
        layer.load_state_dict(state)
    state = layer.state_dict()
    state["bias"] = np.zeros(4)
    with pytest.raises(ValueError, match="shape"):
        layer.load_state_dict(state)
