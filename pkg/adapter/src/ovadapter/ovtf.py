"""Writer/reader for the engine's OVTF tensor file format.

Implemented independently against the documented wire layout: magic
"OV3R", u16 version (1), u8 dtype (0=f32, 1=f64, 2=u32, 3=u8), u8 ndim,
ndim u64 dims, row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"OV3R"
VERSION = 1
_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<u4"),
    3: np.dtype("<u1"),
}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<u4"): 2, np.dtype("<u1"): 3}


def write(path, array):
    arr = np.asarray(array)
    if arr.ndim > 4:
        raise InputError(f"OVTF allows at most 4 dims, got {arr.ndim}")
    canonical = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _CODES.get(np.dtype(canonical))
    if code is None:
        # default float payloads to f64, integer payloads are explicit
        if np.issubdtype(arr.dtype, np.floating):
            code = 1
        else:
            raise InputError(f"dtype {arr.dtype} has no OVTF encoding")
    arr = arr.astype(_DTYPES[code], copy=False)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HBB", VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read(path):
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise InputError(f"{path}: bad magic {blob[:4]!r}")
    version, code, ndim = struct.unpack("<HBB", blob[4:8])
    if version != VERSION or code not in _DTYPES or ndim > 4:
        raise InputError(f"{path}: unsupported OVTF header")
    dims = struct.unpack(f"<{ndim}Q", blob[8 : 8 + 8 * ndim]) if ndim else ()
    dtype = _DTYPES[code]
    payload = blob[8 + 8 * ndim :]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if dims else dtype.itemsize
    if len(payload) != expected:
        raise InputError(f"{path}: payload size mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
