"""OVTF: the engine's little-endian binary tensor file format.

Layout (all little-endian):

    magic   4 bytes   b"OV3R"
    version u16       currently 1
    dtype   u8        0 = f32, 1 = f64, 2 = u32, 3 = u8
    ndim    u8
    dims    ndim * u64
    payload product(dims) * itemsize bytes, row-major

``write`` then ``read`` is a byte-exact identity. Readers validate the magic,
the version, the dtype, and the size arithmetic before touching the payload,
and reject absurd dimension products before allocating anything.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ShapeError, UnsupportedError

MAGIC = b"OV3R"
VERSION = 1

# dtype code <-> numpy dtype (fixed little-endian widths)
_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<u4"),
    3: np.dtype("<u1"),
}
_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint32): 2,
    np.dtype(np.uint8): 3,
}

MAX_DIMS = 4
MAX_ELEMENTS = 1 << 40  # reject oversize declarations before allocation


def dtype_code(arr):
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        code = _CODES.get(np.dtype(arr.dtype.type))
    if code is None:
        raise UnsupportedError(f"dtype {arr.dtype} has no OVTF encoding")
    return code


def _contiguous(array):
    # ascontiguousarray would promote 0-dim scalars to shape (1,)
    arr = np.asarray(array)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def write(path, array):
    """Serialize a numpy array (f32/f64/u32/u8, up to 4 dims) to ``path``."""
    arr = _contiguous(array)
    if arr.ndim > MAX_DIMS:
        raise ShapeError(f"OVTF supports at most {MAX_DIMS} dims, got {arr.ndim}")
    code = dtype_code(arr)
    arr = arr.astype(_DTYPES[code], copy=False)
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read(path):
    """Read an OVTF tensor, validating the header before allocation."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    return from_bytes(blob, origin=str(path))


def to_bytes(array):
    arr = _contiguous(array)
    if arr.ndim > MAX_DIMS:
        raise ShapeError(f"OVTF supports at most {MAX_DIMS} dims, got {arr.ndim}")
    code = dtype_code(arr)
    arr = arr.astype(_DTYPES[code], copy=False)
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def from_bytes(blob, origin="<bytes>"):
    if len(blob) < 8:
        raise FormatError(f"{origin}: header truncated ({len(blob)} bytes)")
    magic = blob[:4]
    if magic != MAGIC:
        raise FormatError(f"{origin}: bad magic {magic!r}, expected {MAGIC!r}")
    version, code, ndim = struct.unpack("<HBB", blob[4:8])
    if version != VERSION:
        raise UnsupportedError(f"{origin}: unsupported OVTF version {version}")
    if code not in _DTYPES:
        raise UnsupportedError(f"{origin}: unknown dtype code {code}")
    if ndim > MAX_DIMS:
        raise UnsupportedError(f"{origin}: ndim {ndim} exceeds the format limit")
    dims_end = 8 + 8 * ndim
    if len(blob) < dims_end:
        raise CorruptionError(f"{origin}: dimension block truncated")
    dims = struct.unpack(f"<{ndim}Q", blob[8:dims_end]) if ndim else ()
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise CorruptionError(
                f"{origin}: declared element count exceeds {MAX_ELEMENTS}"
            )
    dtype = _DTYPES[code]
    expected = count * dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise CorruptionError(
            f"{origin}: payload is {len(payload)} bytes, dims {dims} require {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.copy()
