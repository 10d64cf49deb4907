"""Flat binary parameter snapshots.

Layout (all little-endian): magic ``YNET``, u32 version, then one record per
parameter: u32 name length, utf-8 name, u32 rank, u32 dims, float64 payload.
Records run to end of file; insertion order is preserved.
"""

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"YNET"
VERSION = 1


def save_params(params, path):
    """Write an ordered {name: array-or-Tensor} mapping to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, value in params.items():
            arr = np.asarray(getattr(value, "data", value), dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_params(path):
    """Read a snapshot back into an OrderedDict of float64 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad snapshot magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    params = OrderedDict()
    pos = 8
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        params[name] = arr.reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes in snapshot")
    return params
