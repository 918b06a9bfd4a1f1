"""Binary tensor ("HGT1") and named-tensor bundle ("HGC1") formats.

HGT1: ``b"HGT1"``, rank (u32 LE), each dim (u32 LE), then values as f32 LE in
row-major order.  Values are narrowed to float32 on write and widened to
float64 on read.

HGC1: ``b"HGC1"``, entry count (u32 LE), then per entry the name length
(u32 LE), the UTF-8 name, and one HGT1 tensor.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"HGT1"
BUNDLE_MAGIC = b"HGC1"


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def narrow(value) -> np.ndarray:
    """Round-trip through float32, i.e. exactly what a file would hold."""
    return np.asarray(value, dtype=np.float64).astype("<f4").astype(np.float64)


def write_tensor(stream: BinaryIO, value) -> None:
    arr = np.asarray(value, dtype=np.float64)
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    offset = stream.tell()
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}", offset)
    return data


def read_tensor(stream: BinaryIO) -> np.ndarray:
    offset = stream.tell()
    magic = _read_exact(stream, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}", offset)
    (rank,) = struct.unpack("<I", _read_exact(stream, 4, "rank"))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "dims"))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = _read_exact(stream, 4 * count, "values")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)


def tensor_bytes(value) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, value)
    return buf.getvalue()


def save_tensor(path: str | Path, value) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, value)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after tensor", fh.tell() - 1)
    return arr


def save_bundle(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name, value in entries.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        write_tensor(buf, value)
    Path(path).write_bytes(buf.getvalue())


def load_bundle(path: str | Path) -> dict[str, np.ndarray]:
    stream = io.BytesIO(Path(path).read_bytes())
    magic = _read_exact(stream, 4, "magic")
    if magic != BUNDLE_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    (count,) = struct.unpack("<I", _read_exact(stream, 4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack("<I", _read_exact(stream, 4, "name length"))
        offset = stream.tell()
        try:
            name = _read_exact(stream, length, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", offset) from None
        out[name] = read_tensor(stream)
    return out


def text_to_tensor(text: str) -> np.ndarray:
    """Pack UTF-8 text as a 1-D tensor of byte values (exact in float32)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def tensor_to_text(value: np.ndarray) -> str:
    return bytes(np.asarray(value, dtype=np.float64).astype(np.uint8).tolist()).decode("utf-8")
