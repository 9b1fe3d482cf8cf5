"""Binary tensor records and checkpoint files.

A record is: u32 name length, UTF-8 name, u32 rank, u32 dims, then f64
data, all little-endian. A checkpoint is a length-prefixed UTF-8 JSON
header followed by records until end of file.
"""

from __future__ import annotations

import json
import os
import struct
from typing import BinaryIO, Iterator

import numpy as np

from .errors import FormatError

_U32 = struct.Struct("<I")


def write_record(f: BinaryIO, name: str, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    raw = name.encode("utf-8")
    f.write(_U32.pack(len(raw)))
    f.write(raw)
    f.write(_U32.pack(arr.ndim))
    for d in arr.shape:
        f.write(_U32.pack(d))
    f.write(arr.tobytes(order="C"))


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    pos = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", offset=pos)
    return buf


def read_record(f: BinaryIO) -> tuple[str, np.ndarray] | None:
    """Next record, or None at a clean end of file."""
    pos = f.tell()
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise FormatError("truncated record header", offset=pos)
    (nlen,) = _U32.unpack(head)
    try:
        name = _read_exact(f, nlen, "record name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("record name is not valid UTF-8", offset=pos + 4) from exc
    (rank,) = _U32.unpack(_read_exact(f, 4, "rank"))
    dims = tuple(_U32.unpack(_read_exact(f, 4, "dimension"))[0] for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(f, 8 * count, f"data of {name!r}"), dtype="<f8")
    return name, data.astype(np.float64).reshape(dims)


def iter_records(f: BinaryIO) -> Iterator[tuple[str, np.ndarray]]:
    while (rec := read_record(f)) is not None:
        yield rec


def save_checkpoint(path, header: dict, arrays: dict) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(tmp, "wb") as f:
        f.write(_U32.pack(len(raw)))
        f.write(raw)
        for name, arr in arrays.items():
            write_record(f, name, arr)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        (hlen,) = _U32.unpack(_read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError("checkpoint header is not valid JSON", offset=4) from exc
        arrays = dict(iter_records(f))
    return header, arrays
