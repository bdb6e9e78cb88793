"""Binary tensor container ("CVML" format).

Layout: magic bytes ``CVML``, format version u16, entry count u32, then per
entry: name length u16, name bytes (utf-8), rank u8, one u32 per dimension,
and the float32 payload. All integers and floats are little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError
from .autodiff import Tensor

MAGIC = b"CVML"
VERSION = 1


def save_tensors(path, arrays: dict) -> None:
    """Write named float32 arrays to `path`, preserving insertion order."""
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path) -> dict:
    """Read a CVML file back into an ordered dict of float32 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n, what):
        nonlocal offset
        if offset + n > len(blob):
            raise DataError(f"{path}: truncated while reading {what}")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    offset = 0
    if take(4, "magic") != MAGIC:
        raise DataError(f"{path}: bad magic, not a CVML file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = tuple(
            struct.unpack("<I", take(4, f"dim of {name}"))[0] for _ in range(rank)
        )
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = take(4 * n_items, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return arrays


def save_params(path, params: dict) -> None:
    save_tensors(path, {name: p.data for name, p in params.items()})


def load_params(path) -> dict:
    return {
        name: Tensor(arr, requires_grad=True) for name, arr in load_tensors(path).items()
    }
