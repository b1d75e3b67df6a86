"""Canonical length-prefixed binary encoding.

Byte strings are a 4-byte big-endian length followed by the bytes, unsigned
integers are 8 bytes big-endian, flags one byte, and optionals a presence
flag followed by the value. Field order is fixed by the caller.
"""

import struct

from errors import CodecError

_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class CanonicalWriter:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def raw(self, value: bytes) -> "CanonicalWriter":
        self._parts.append(bytes(value))
        return self

    def bytes_(self, value: bytes) -> "CanonicalWriter":
        self._parts.append(_LEN.pack(len(value)))
        self._parts.append(bytes(value))
        return self

    def text(self, value: str) -> "CanonicalWriter":
        return self.bytes_(value.encode("utf-8"))

    def uint(self, value: int) -> "CanonicalWriter":
        if value < 0:
            raise CodecError(f"cannot encode negative integer {value}")
        self._parts.append(_U64.pack(value))
        return self

    def flag(self, value: bool) -> "CanonicalWriter":
        self._parts.append(b"\x01" if value else b"\x00")
        return self

    def optional_bytes(self, value: bytes | None) -> "CanonicalWriter":
        self.flag(value is not None)
        if value is not None:
            self.bytes_(value)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class CanonicalReader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, size: int) -> bytes:
        end = self._pos + size
        if end > len(self._data):
            raise CodecError(f"truncated input: need {size} bytes at offset {self._pos}")
        chunk = self._data[self._pos:end].tobytes()
        self._pos = end
        return chunk

    def bytes_(self) -> bytes:
        (size,) = _LEN.unpack(self._take(_LEN.size))
        return self._take(size)

    def text(self) -> str:
        try:
            return self.bytes_().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError("invalid utf-8 text field") from exc

    def uint(self) -> int:
        (value,) = _U64.unpack(self._take(_U64.size))
        return value

    def flag(self) -> bool:
        value = self._take(1)
        if value not in (b"\x00", b"\x01"):
            raise CodecError(f"invalid flag byte {value!r}")
        return value == b"\x01"

    def optional_bytes(self) -> bytes | None:
        return self.bytes_() if self.flag() else None

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def finish(self) -> None:
        if self.remaining:
            raise CodecError(f"{self.remaining} trailing bytes after canonical value")
