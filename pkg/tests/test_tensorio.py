import numpy as np
import pytest

from ircr.tensorio import TensorFileError, load_tensor, save_tensor


@pytest.mark.parametrize(
    "arr",
    [
        np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7.0,
        np.arange(-5, 7, dtype=np.int32).reshape(3, 4),
        np.arange(16, dtype=np.uint8).reshape(4, 4),
        np.array([3.5]),
    ],
)
def test_round_trip_bit_exact(tmp_path, arr):
    path = tmp_path / "t"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_bool_saved_via_uint8(tmp_path):
    mask = np.array([[True, False], [False, True]])
    save_tensor(tmp_path / "m", mask.astype(np.uint8))
    assert np.array_equal(load_tensor(tmp_path / "m").astype(bool), mask)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(TensorFileError, match="nothere"):
        load_tensor(tmp_path / "nothere")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"JUNKxxxxxxxx")
    with pytest.raises(TensorFileError, match="magic"):
        load_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t"
    save_tensor(path, np.zeros((4, 4)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(TensorFileError, match="mismatch"):
        load_tensor(path)


def test_unknown_dtype_rejected(tmp_path):
    with pytest.raises(TensorFileError, match="unsupported dtype"):
        save_tensor(tmp_path / "c", np.zeros(3, dtype=np.complex128))
