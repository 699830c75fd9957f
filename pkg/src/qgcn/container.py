"""Checksummed binary container for named float64 arrays plus JSON metadata.

Byte layout (all integers little-endian):

    offset  size        field
    0       8           magic (e.g. b"QGCNDATA", b"QGCNCKPT")
    8       4           format version, u32
    12      8           metadata length L in bytes, u64
    20      L           metadata, UTF-8 JSON (sorted keys); its "arrays" entry
                        lists [name, shape] for every array in file order
    ...                 per array, in declared order:
                          u16 name length, name bytes (UTF-8)
                          u8 ndim, ndim x u64 dimensions
                          prod(shape) x f8 little-endian payload
                          u32 CRC32 of the payload bytes

Nothing may follow the last array.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, IOFailure, MagicMismatch, TruncatedPayload, UnsupportedVersion

VERSION = 1
_F8 = np.dtype("<f8")


def encode(magic: bytes, meta: dict, arrays: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    arrays = {k: np.ascontiguousarray(v, dtype=_F8) for k, v in arrays.items()}
    meta = dict(meta)
    meta["arrays"] = [[k, list(v.shape)] for k, v in arrays.items()]
    mbytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<IQ", version, len(mbytes)), mbytes]
    for name, a in arrays.items():
        nb = name.encode("utf-8")
        payload = a.tobytes()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(payload)
        parts.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"file ends inside {what} (need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, magic: bytes, versions=(VERSION,)) -> tuple[int, dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    got = r.take(8, "magic")
    if got != magic:
        raise MagicMismatch(f"expected magic {magic!r}, found {got!r}")
    version, mlen = r.unpack("<IQ", "header")
    if version not in versions:
        raise UnsupportedVersion(f"format version {version} is not supported (known: {list(versions)})")
    try:
        meta = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"metadata block is not valid JSON: {e}") from None
    declared = meta.get("arrays")
    if not isinstance(declared, list):
        raise FormatError("metadata lacks the 'arrays' declaration")
    arrays: dict[str, np.ndarray] = {}
    for entry in declared:
        dname, dshape = entry[0], tuple(entry[1])
        (nlen,) = r.unpack("<H", f"name header of {dname}")
        name = r.take(nlen, f"name of {dname}").decode("utf-8", errors="replace")
        if name != dname:
            raise FormatError(f"array order mismatch: declared {dname!r}, found {name!r}")
        (ndim,) = r.unpack("<B", f"shape header of {name}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        if tuple(shape) != dshape:
            raise FormatError(f"array {name}: header shape {tuple(shape)} differs from declared {dshape}")
        count = int(np.prod(shape, dtype=np.int64))
        payload = r.take(8 * count, f"payload of {name}")
        (crc,) = r.unpack("<I", f"checksum of {name}")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in array {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=_F8).reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} unexpected trailing bytes")
    return version, meta, arrays


def write(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    write_bytes(path, encode(magic, meta, arrays))


def write_bytes(path, data: bytes) -> None:
    """Write atomically: a temporary sibling is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise IOFailure(f"cannot write {path}: {e}") from None


def read(path, magic: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}") from None
    return decode(buf, magic)
