"""Writer for the toolkit's tensor-archive format.

Independent implementation of the published layout: magic ``PELTNSR0``,
uint32 LE entry count, then per entry uint16 LE name length + UTF-8 name,
dtype byte (0=float32, 1=uint8, 2=int64, 3=float64), rank byte, rank uint32
LE extents, and the raw little-endian row-major payload. Entries are sorted
by name so re-exports are byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PELTNSR0"

_CODES = {"float32": 0, "uint8": 1, "int64": 2, "float64": 3}


def _canonical(arr: np.ndarray) -> tuple[np.ndarray, int]:
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr, _CODES["uint8"]
    if arr.dtype.kind == "f" and arr.dtype.itemsize == 8:
        return arr.astype("<f8"), _CODES["float64"]
    if arr.dtype.kind == "f":
        return arr.astype("<f4"), _CODES["float32"]
    if arr.dtype.kind in "iu":
        return arr.astype("<i8"), _CODES["int64"]
    raise ValueError(f"unsupported dtype {arr.dtype}")


def write_archive(entries: dict[str, np.ndarray], path) -> None:
    with open(Path(path), "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr, code = _canonical(entries[name])
            if arr.ndim > 0:
                arr = np.ascontiguousarray(arr)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def json_entry(obj) -> np.ndarray:
    """A JSON document as a uint8 meta tensor."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()
