import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from atrousseg.pnm import (PnmError, decode_pnm, encode_pnm, image_to_tensor, read_pgm, read_ppm,
                           tensor_to_image, write_pgm, write_ppm)


def test_minimal_file():
    arr = decode_pnm(b"P5\n2 2\n255\n" + bytes([1, 2, 3, 4]))
    np.testing.assert_array_equal(arr, [[1, 2], [3, 4]])
    assert arr.dtype == np.uint8


def test_comments_between_tokens():
    data = b"P6 # a comment\n# another\n1 #w\n 1\n#max\n255\n" + bytes([10, 20, 30])
    np.testing.assert_array_equal(decode_pnm(data), [[[10, 20, 30]]])


@pytest.mark.parametrize("data,offset", [
    (b"P4\n1 1\n255\n\x00", 0),
    (b"P5\n2 2\n255\n\x00\x01", 13),
    (b"P5\n2 x\n255\n", 5),
    (b"P5\n2 2\n", 7),
    (b"P5\n2 2\n65535\n" + bytes(8), 12),
    (b"P", 0),
])
def test_errors_report_offsets(data, offset):
    with pytest.raises(PnmError) as err:
        decode_pnm(data)
    assert err.value.offset == offset
    assert f"byte {offset}" in str(err.value)


def test_read_checks_kind(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.zeros((2, 3), np.uint8))
    with pytest.raises(PnmError):
        read_ppm(tmp_path / "a.pgm")
    write_ppm(tmp_path / "a.ppm", np.zeros((2, 3, 3), np.uint8))
    with pytest.raises(PnmError):
        read_pgm(tmp_path / "a.ppm")
    with pytest.raises(ValueError):
        encode_pnm(np.zeros((2, 2), np.int32))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_pgm_round_trip(arr):
    data = encode_pnm(arr)
    back = decode_pnm(data)
    assert np.array_equal(back, arr)
    assert encode_pnm(back) == data


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_round_trip(arr):
    data = encode_pnm(arr)
    assert data.startswith(b"P6\n")
    assert encode_pnm(decode_pnm(data)) == data


def test_tensor_mapping():
    rgb = np.array([[[0, 128, 255]]], np.uint8)
    t = image_to_tensor(rgb)
    assert t.shape == (3, 1, 1)
    np.testing.assert_allclose(t[:, 0, 0], [0, 128 / 255, 1])
    assert np.array_equal(tensor_to_image(t), rgb)
