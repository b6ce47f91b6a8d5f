"""Binary weight checkpoints.

Layout (all integers little-endian)::

    magic        4 bytes  b"PSEG"
    version      u16
    meta_len     u32      followed by meta_len bytes of UTF-8 JSON
    count        u32
    count x entry:
        name_len u16, name (UTF-8)
        ndim     u8,  ndim x u32 extents
        float32 values, row-major, product(extents) of them

Metadata is serialized with sorted keys so that save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Callable, Mapping

import numpy as np

from .errors import CorruptHeaderError, ShapeMismatchError, TruncatedFileError

MAGIC = b"PSEG"
VERSION = 1


def write_checkpoint(path: str | os.PathLike, entries: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(
    path: str | os.PathLike,
    expected: Mapping[str, tuple[int, ...]] | Callable[[dict], Mapping[str, tuple[int, ...]]] | None = None,
) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint written by :func:`write_checkpoint`.

    If ``expected`` is given, each entry's recorded shape is validated against
    it before its payload is read. ``expected`` may also be a callable that
    derives the shape table from the decoded metadata.

    Raises:
        CorruptHeaderError: bad magic, unsupported version or unreadable metadata.
        ShapeMismatchError: a recorded shape or name differs from ``expected``.
        TruncatedFileError: the file ends before the declared content.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CorruptHeaderError(f"{path}: not a palmseg checkpoint (bad magic)")
    r.pos = 4
    version, meta_len = r.unpack("<HI")
    if version != VERSION:
        raise CorruptHeaderError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable metadata block ({exc})") from exc
    if callable(expected):
        expected = expected(meta)

    (count,) = r.unpack("<I")
    if expected is not None and count != len(expected):
        raise ShapeMismatchError(f"{path}: {count} entries, expected {len(expected)}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I"))
        if expected is not None:
            if name not in expected:
                raise ShapeMismatchError(f"{path}: unexpected entry '{name}'")
            if tuple(expected[name]) != shape:
                raise ShapeMismatchError(f"{path}: entry '{name}' has shape {shape}, expected {tuple(expected[name])}")
        n = int(np.prod(shape, dtype=np.int64))
        entries[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CorruptHeaderError(f"{path}: {len(buf) - r.pos} trailing bytes after last entry")
    return meta, entries
