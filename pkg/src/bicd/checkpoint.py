"""Binary checkpoint format.

Layout: magic b"BICD", format version u32 LE, then one record per tensor
(name length u32, UTF-8 name, dtype tag u8, rank u8, dims u64 each, raw
little-endian data), and a trailing CRC-32 over everything after the
magic+version header.  Record order follows the input mapping, so identical
parameter sets produce byte-identical files.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"BICD"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("uint8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<u8"): 4,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """Corrupt or malformed checkpoint file."""


def save_checkpoint(path, tensors: dict):
    """Write name->array mappings; arrays are stored little-endian."""
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if np.dtype(dt) not in _DTYPE_TAGS:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        name_b = name.encode("utf-8")
        payload += struct.pack("<I", len(name_b))
        payload += name_b
        payload += struct.pack("<BB", _DTYPE_TAGS[np.dtype(dt)], arr.ndim)
        for d in arr.shape:
            payload += struct.pack("<Q", d)
        payload += np.ascontiguousarray(arr, dtype=dt).tobytes()
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(payload)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path) -> dict:
    """Read back a name->array mapping, verifying magic, version, and CRC."""
    data = open(path, "rb").read()
    if len(data) < 12:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    payload = data[8:-4]
    (crc_stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    tensors: dict = {}
    pos = 0
    while pos < len(payload):
        if pos + 4 > len(payload):
            raise CheckpointError(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        name = payload[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tag, rank = struct.unpack_from("<BB", payload, pos)
        pos += 2
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        dims = struct.unpack_from(f"<{rank}Q", payload, pos)
        pos += 8 * rank
        dt = _TAG_DTYPES[tag]
        count = int(np.prod(dims)) if rank else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated tensor data for {name!r}")
        arr = np.frombuffer(payload[pos : pos + nbytes], dtype=dt).reshape(dims).copy()
        pos += nbytes
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = arr
    return tensors
