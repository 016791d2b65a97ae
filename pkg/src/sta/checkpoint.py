"""Versioned binary checkpoints.

Layout (little-endian): magic ``STACKPT``, u32 format version, u32 length +
canonical JSON header (config echo, counters, optimizer hyperparameters, rng
state), u32 array count, then per array: u32 name length, utf-8 name, u32
ndim, u32 dims, float64 payload. A CRC-32 of everything before it closes the
file.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import FormatError, IncompatibleVersionError, IntegrityError

MAGIC = b"STACKPT"
VERSION = 1


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps(header, arrays):
    head = canonical_json(header).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(head)), head,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(buf):
    """Returns (header dict, {name: array}); raises before returning anything partial."""
    if len(buf) < len(MAGIC) + 8 or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    version = struct.unpack_from("<I", buf, len(MAGIC))[0]
    if version != VERSION:
        raise IncompatibleVersionError(f"checkpoint format version {version}, this build reads {VERSION}",
                                       len(MAGIC))
    body, tail = buf[:-4], buf[-4:]
    if struct.unpack("<I", tail)[0] != zlib.crc32(body):
        raise IntegrityError("checkpoint checksum mismatch", len(buf) - 4)
    pos = len(MAGIC) + 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise IntegrityError("truncated checkpoint", pos)
        out = body[pos:pos + n]
        pos += n
        return out

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        name = take(klen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(body):
        raise FormatError("trailing bytes in checkpoint", pos)
    return header, arrays


def save(path, header, arrays):
    data = dumps(header, arrays)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
