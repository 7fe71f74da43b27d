"""CKP1 parameter checkpoints: a magic header followed by named f32 records."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError

MAGIC = b"CKP1"


def dumps(state) -> bytes:
    """Serialize ``{name: array}`` in dict order. Data is stored as little-endian f32."""
    parts = [MAGIC]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise ParseError(f"bad checkpoint magic {buf[:4]!r}", offset=0)
    state, off = {}, 4
    try:
        while off < len(buf):
            start = off
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if off + 4 * count > len(buf):
                raise ParseError(f"record {name!r} truncated", offset=start)
            state[name] = np.frombuffer(buf, "<f4", count, off).reshape(dims).copy()
            off += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed checkpoint record: {exc}", offset=off) from None
    return state


def save(path, state):
    Path(path).write_bytes(dumps(state))


def load(path):
    return loads(Path(path).read_bytes())
