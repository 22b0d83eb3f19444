"""Binary checkpoint container.

Layout, all integers little-endian::

    b"STDL"  u32 version  u32 entry_count
    per entry:
        u32 name_length  name (UTF-8)
        u8  dtype_tag
        u64 rank  u64 dims[rank]
        raw array bytes (C order, little-endian)
"""

from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"STDL"
VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
TAG_DTYPES = {tag: dt for dt, tag in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def encode(entries: "OrderedDict[str, np.ndarray]") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", DTYPE_TAGS[dt]))
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def decode(data: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an STDL checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    entries = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (tag,) = struct.unpack_from("<B", view, pos)
            (rank,) = struct.unpack_from("<Q", view, pos + 1)
            pos += 9
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            dt = TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(view):
                raise CheckpointError(f"truncated data for entry {name!r}")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(dims).copy()
            pos += nbytes
            entries[name] = arr
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(view):
        raise CheckpointError("trailing bytes after last entry")
    return entries


def save(path, entries) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    data = encode(entries)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return decode(fh.read())


def text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def entry_text(arr: np.ndarray) -> str:
    return arr.tobytes().decode("utf-8")
