"""Binary container for named float64 tensors.

Layout (little-endian)::

    b"MVAWE1" | u32 version
    repeated until EOF:
        u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f64 values[prod(dims)]
"""

import struct

import numpy as np

from mvawe.errors import DataError

MAGIC = b"MVAWE1"
VERSION = 1


def save_tensors(path, named):
    """Write ``{name: array}`` in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in named.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:6] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 10:
        raise DataError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 6)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise DataError(f"{path}: truncated tensor name")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(buf):
                raise DataError(f"{path}: truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint ({exc})") from exc
    return out
