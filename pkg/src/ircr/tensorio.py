"""IRCR-T binary tensor container.

Layout: magic ``IRCR``, u8 version (=1), u8 dtype code (0 = float64,
1 = int32, 2 = uint8), u8 ndim, ``ndim`` little-endian u32 dims, then the
row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"IRCR"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i4"), 2: np.dtype("<u1")}
_CODE_FOR_KIND = {"f": 0, "i": 1, "u": 2}


class TensorFileError(IOError):
    """Raised for missing, truncated or malformed IRCR-T files."""


def dtype_code(arr: np.ndarray) -> int:
    kind = arr.dtype.kind
    if kind not in _CODE_FOR_KIND:
        raise TensorFileError(f"unsupported dtype {arr.dtype} for IRCR-T")
    return _CODE_FOR_KIND[kind]


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write ``arr`` (float64, int32 or uint8) as an IRCR-T file."""
    path = Path(path)
    code = dtype_code(arr)
    arr = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    path.write_bytes(header + arr.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise TensorFileError(f"cannot read tensor file {path}: {exc}") from exc
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: not an IRCR-T file (bad magic)")
    version, code, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported IRCR-T version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    offset = 7
    if len(raw) < offset + 4 * ndim:
        raise TensorFileError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, offset)
    offset += 4 * ndim
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise TensorFileError(
            f"{path}: payload size mismatch (got {len(raw) - offset} bytes, "
            f"expected {count * dtype.itemsize})"
        )
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims).copy()
