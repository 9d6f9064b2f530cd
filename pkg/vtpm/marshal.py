"""Big-endian binary Writer/Reader shared by every on-disk and wire format.

All multi-byte integers are unsigned big-endian (TPM convention).
"""
from __future__ import annotations

import struct

from vtpm.errors import MarshalError


class Writer:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> Writer:
        self._parts.append(struct.pack(">B", value))
        return self

    def u16(self, value: int) -> Writer:
        self._parts.append(struct.pack(">H", value))
        return self

    def u32(self, value: int) -> Writer:
        self._parts.append(struct.pack(">I", value))
        return self

    def u64(self, value: int) -> Writer:
        self._parts.append(struct.pack(">Q", value))
        return self

    def raw(self, data: bytes) -> Writer:
        self._parts.append(bytes(data))
        return self

    def fixed(self, data: bytes, size: int) -> Writer:
        if len(data) != size:
            raise ValueError(f"expected {size} bytes, got {len(data)}")
        return self.raw(data)

    def sized16(self, data: bytes) -> Writer:
        return self.u16(len(data)).raw(data)

    def sized32(self, data: bytes) -> Writer:
        return self.u32(len(data)).raw(data)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_buf", "_pos")

    def __init__(self, data: bytes) -> None:
        self._buf = memoryview(bytes(data))
        self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self._buf) - self._pos

    def _take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._buf):
            raise MarshalError("ERR_TRUNCATED", f"need {n} bytes at offset {self._pos}, have {self.remaining}")
        out = self._buf[self._pos : self._pos + n].tobytes()
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def sized16(self) -> bytes:
        return self._take(self.u16())

    def sized32(self) -> bytes:
        return self._take(self.u32())

    def expect_magic(self, magic: bytes) -> None:
        got = self._take(len(magic))
        if got != magic:
            raise MarshalError("ERR_CORRUPT", f"bad magic {got!r}, expected {magic!r}")

    def finish(self) -> None:
        if self.remaining:
            raise MarshalError("ERR_CORRUPT", f"{self.remaining} trailing bytes")
