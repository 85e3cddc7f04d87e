import struct

import numpy as np
import pytest

from fusionproxy.fpx import (
    decode_tensor,
    encode_tensor,
    read_tensor,
    read_tensor_dims,
    write_tensor,
)


@pytest.mark.parametrize(
    "shape",
    [(), (1,), (7,), (3, 5), (2, 3, 4), (1, 2, 3, 4)],
)
def test_round_trip_bitexact(shape):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal(shape).astype(np.float32)
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == np.float32
    assert out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_special_values_survive():
    arr = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-45], dtype=np.float32)
    out = decode_tensor(encode_tensor(arr))
    assert out.tobytes() == arr.tobytes()


def test_header_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = encode_tensor(arr)
    assert blob[:4] == b"FPX1"
    dtype_code, rank = blob[4], blob[5]
    assert dtype_code == 0 and rank == 2
    dims = struct.unpack("<2I", blob[6:14])
    assert dims == (2, 3)
    assert blob[14:] == arr.tobytes()


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(1).random((4, 5, 2)).astype(np.float32)
    path = tmp_path / "t.fpx"
    write_tensor(path, arr)
    assert read_tensor_dims(path) == (4, 5, 2)
    out = read_tensor(path)
    assert out.tobytes() == arr.tobytes()


def test_float64_input_is_cast():
    arr = np.array([[1.5, 2.5]], dtype=np.float64)
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, arr.astype(np.float32))


def test_bad_magic_rejected():
    blob = encode_tensor(np.zeros(3, dtype=np.float32))
    with pytest.raises(ValueError, match="version"):
        decode_tensor(b"XXXX" + blob[4:])


def test_unknown_dtype_code_rejected():
    blob = bytearray(encode_tensor(np.zeros(3, dtype=np.float32)))
    blob[4] = 9
    with pytest.raises(ValueError, match="dtype"):
        decode_tensor(bytes(blob))


def test_truncated_payload_rejected():
    blob = encode_tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        decode_tensor(blob[:-3])


def test_trailing_bytes_rejected():
    blob = encode_tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        decode_tensor(blob + b"\x00")
