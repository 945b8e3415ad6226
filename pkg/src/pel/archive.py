"""Binary tensor-archive codec.

Layout: magic ``PELTNSR0``; uint32 LE entry count; per entry a uint16 LE name
length, the UTF-8 name, a dtype byte (0=float32, 1=uint8, 2=int64, 3=float64),
a rank byte, rank uint32 LE extents, then the raw little-endian row-major
payload. Entries are written in sorted name order so serialization is
deterministic and re-saving a loaded archive is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArchiveError

MAGIC = b"PELTNSR0"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("uint8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<f8"): 3,
}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("uint8"), 2: np.dtype("<i8"), 3: np.dtype("<f8")}


def save_archive(entries: dict[str, np.ndarray], path) -> None:
    """Write named arrays to ``path`` in the archive format."""
    path = Path(path)
    blobs = []
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        if arr.ndim > 0:
            arr = np.ascontiguousarray(arr)  # ascontiguousarray would promote rank 0 to rank 1
        if arr.dtype.kind == "f" and arr.dtype.itemsize == 4:
            arr = arr.astype("<f4", copy=False)
        elif arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "iu" and arr.dtype != np.dtype("uint8"):
            arr = arr.astype("<i8", copy=False)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ArchiveError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise ArchiveError(f"entry name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise ArchiveError(f"entry {name!r}: rank {arr.ndim} too large")
        header = struct.pack("<H", len(name_b)) + name_b
        header += struct.pack("<BB", code, arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blobs.append(header + arr.tobytes())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blobs)))
        for blob in blobs:
            f.write(blob)


def load_archive(path) -> dict[str, np.ndarray]:
    """Read an archive back into a name -> array mapping (load order preserved)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ArchiveError(f"cannot read archive {path}: {e}") from e
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise ArchiveError(f"{path}: bad magic, not a tensor archive")
    (count,) = struct.unpack_from("<I", raw, len(MAGIC))
    pos = len(MAGIC) + 4
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
        except struct.error as e:
            raise ArchiveError(f"{path}: truncated header for entry #{i}") from e
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise ArchiveError(f"{path}: entry {name!r} has unknown dtype code {code}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if pos + nbytes > len(raw):
            raise ArchiveError(f"{path}: truncated payload for entry {name!r}")
        arr = np.frombuffer(raw[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
        entries[name] = arr
    if pos != len(raw):
        raise ArchiveError(f"{path}: {len(raw) - pos} trailing bytes after last entry")
    return entries


def pack_json(obj) -> np.ndarray:
    """Encode a JSON document as a uint8 byte tensor (for meta entries)."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    return json.loads(bytes(arr.astype(np.uint8)).decode("utf-8"))


def pack_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def unpack_text(arr: np.ndarray) -> str:
    return bytes(arr.astype(np.uint8)).decode("utf-8")
