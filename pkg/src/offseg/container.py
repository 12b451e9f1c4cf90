"""Little-endian binary container primitives shared by dataset and checkpoint files.

Both file kinds follow the same header discipline: a 4-byte ASCII magic, a
u32 format version, then typed payload fields. Readers track the byte offset
and report it in every parse error.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Malformed container file; `offset` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Reader:
    """Cursor over an in-memory file image with positioned errors."""

    def __init__(self, blob: bytes, source: str = "<bytes>"):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.source}: truncated while reading {what} "
                f"({n} bytes needed, {len(self.blob) - self.pos} left)",
                self.pos,
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def magic(self, expected: bytes) -> None:
        at = self.pos
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(
                f"{self.source}: bad magic {got!r}, expected {expected!r}", at
            )

    def version(self, expected: int) -> None:
        at = self.pos
        got = self.u32("format version")
        if got != expected:
            raise FormatError(
                f"{self.source}: unsupported format version {got}, expected {expected}",
                at,
            )

    def array(self, dtype: np.dtype, count: int, what: str) -> np.ndarray:
        dtype = np.dtype(dtype).newbyteorder("<")
        raw = self.take(dtype.itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))

    def expect_eof(self) -> None:
        if self.pos != len(self.blob):
            raise FormatError(
                f"{self.source}: {len(self.blob) - self.pos} trailing bytes", self.pos
            )


def pack_u32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def array_bytes(arr: np.ndarray) -> bytes:
    """Row-major little-endian raw bytes of an array."""
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


# Tensor-block encoding used by checkpoints: named, shaped, typed arrays.

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_tensor_block(name: str, arr: np.ndarray) -> bytes:
    dtype = np.dtype(arr.dtype)
    if dtype not in _DTYPE_TAGS:
        raise ValueError(f"unsupported tensor dtype {dtype} for {name!r}")
    encoded = name.encode("utf-8")
    parts = [
        pack_u32(len(encoded)),
        encoded,
        bytes([_DTYPE_TAGS[dtype]]),
        pack_u32(arr.ndim, *arr.shape),
    ]
    parts.append(array_bytes(arr))
    return b"".join(parts)


def read_tensor_block(r: Reader) -> tuple[str, np.ndarray]:
    name_len = r.u32("tensor name length")
    if name_len > 4096:
        raise FormatError(f"{r.source}: implausible tensor name length {name_len}", r.pos - 4)
    name = r.take(name_len, "tensor name").decode("utf-8")
    tag_at = r.pos
    tag = r.u8(f"dtype tag of {name!r}")
    if tag not in _TAG_DTYPES:
        raise FormatError(f"{r.source}: unknown dtype tag {tag} for {name!r}", tag_at)
    dtype = _TAG_DTYPES[tag]
    ndim = r.u32(f"rank of {name!r}")
    if ndim > 8:
        raise FormatError(f"{r.source}: implausible rank {ndim} for {name!r}", r.pos - 4)
    shape = tuple(r.u32(f"dim {i} of {name!r}") for i in range(ndim))
    count = 1
    for d in shape:
        count *= d
    data = r.array(dtype, count, f"data of {name!r}").reshape(shape)
    return name, data


def read_file(path: str | Path) -> Reader:
    path = Path(path)
    return Reader(path.read_bytes(), source=str(path))
