"""Little-endian binary helpers shared by the dataset and model containers."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

_F64 = np.dtype("<f8")


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, data: bytes):
        self._parts.append(bytes(data))

    def u8(self, v):
        self._parts.append(struct.pack("<B", v))

    def u32(self, v):
        self._parts.append(struct.pack("<I", v))

    def f64(self, v):
        self._parts.append(struct.pack("<d", v))

    def text(self, s: str):
        data = s.encode("utf-8")
        self.u32(len(data))
        self._parts.append(data)

    def f64_array(self, arr):
        self._parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Sequential reader raising :class:`FormatError` with the failing byte offset."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, n, what):
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def raw(self, n, what="bytes") -> bytes:
        return bytes(self._take(n, what))

    def u8(self, what="u8") -> int:
        return self._take(1, what)[0]

    def u32(self, what="u32") -> int:
        return struct.unpack("<I", self._take(4, what))[0]

    def f64(self, what="f64") -> float:
        return struct.unpack("<d", self._take(8, what))[0]

    def text(self, what="string") -> str:
        start = self.pos
        n = self.u32(what + " length")
        try:
            return bytes(self._take(n, what)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid UTF-8 in {what}", start) from None

    def f64_array(self, count, what="f64 block") -> np.ndarray:
        if count > (len(self.data) - self.pos) // 8:
            raise FormatError(f"truncated file while reading {what} ({count} values)", self.pos)
        chunk = self._take(8 * count, what)
        return np.frombuffer(chunk, dtype=_F64).astype(np.float64)

    def expect_end(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.pos)
