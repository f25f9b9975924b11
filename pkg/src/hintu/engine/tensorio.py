"""Debug tensor dump: b"TSR1", u32 rank, u32 dims, float32 values (little endian)."""

import struct

import numpy as np

from hintu.errors import BadMagicError, TruncatedCheckpointError

MAGIC = b"TSR1"


def dump_tensor(path, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    try:
        (rank,) = struct.unpack_from("<I", raw, 4)
        dims = struct.unpack_from(f"<{rank}I", raw, 8)
    except struct.error as exc:
        raise TruncatedCheckpointError(f"{path}: truncated header") from exc
    start = 8 + 4 * rank
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - start < 4 * count:
        raise TruncatedCheckpointError(f"{path}: expected {count} values, file too short")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(dims).astype(np.float32)
