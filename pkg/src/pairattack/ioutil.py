"""Binary array records, canonical JSON, and atomic file writes.

Every persisted artifact in the pipeline goes through these helpers so that
two serial runs with the same config produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

IMG_MAGIC = b"PATKIMG1"
WTS_MAGIC = b"PATKWTS1"


def write_array_record(fh, arr: np.ndarray, magic: bytes = IMG_MAGIC) -> tuple[int, int]:
    """Append one array record (magic, ndim, dims, float64 LE payload).

    Returns (offset, length) of the record within the file.
    """
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    offset = fh.tell()
    fh.write(magic)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())
    return offset, fh.tell() - offset


def read_array_record(fh, offset: int, magic: bytes = IMG_MAGIC) -> np.ndarray:
    fh.seek(offset)
    got = fh.read(8)
    if got != magic:
        raise ValueError(f"bad magic at offset {offset}: {got!r}")
    (ndim,) = struct.unpack("<I", fh.read(4))
    if ndim > 8:
        raise ValueError(f"implausible ndim {ndim}")
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
    return data.astype(np.float64)


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace drift, newline-terminated."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via temp file + rename so readers never observe partial files."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
