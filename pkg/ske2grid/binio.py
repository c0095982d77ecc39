"""Little-endian binary reader/writer shared by the dataset and checkpoint formats."""

import json
import struct
from typing import Any, Dict

import numpy as np

from .errors import FormatError


class BinaryWriter:
    def __init__(self) -> None:
        self._chunks: list = []

    def raw(self, data: bytes) -> None:
        self._chunks.append(data)

    def u8(self, value: int) -> None:
        self._chunks.append(struct.pack("<B", value))

    def u32(self, value: int) -> None:
        self._chunks.append(struct.pack("<I", value))

    def text(self, value: str) -> None:
        encoded = value.encode("utf-8")
        self.u32(len(encoded))
        self._chunks.append(encoded)

    def json(self, value: Dict[str, Any]) -> None:
        self.text(json.dumps(value, sort_keys=True, separators=(",", ":")))

    def array(self, values: np.ndarray, dtype: str) -> None:
        self._chunks.append(np.ascontiguousarray(values, dtype=np.dtype(dtype)).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)


class BinaryReader:
    """Sequential reader that reports the byte offset of every failure."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.offset = 0
        self.what = what

    def _take(self, count: int, field: str) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError(
                f"truncated {self.what}: needed {count} bytes for {field}, "
                f"{len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def magic(self, expected: bytes) -> None:
        start = self.offset
        found = self._take(len(expected), "magic")
        if found != expected:
            raise FormatError(f"not a {self.what}: magic {found!r} != {expected!r}", start)

    def u8(self, field: str) -> int:
        return struct.unpack("<B", self._take(1, field))[0]

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self._take(4, field))[0]

    def text(self, field: str) -> str:
        length = self.u32(f"{field} length")
        start = self.offset
        try:
            return self._take(length, field).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{field} is not valid UTF-8", start) from exc

    def json(self, field: str) -> Dict[str, Any]:
        start = self.offset
        text = self.text(field)
        try:
            value = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{field} is not valid JSON: {exc.msg}", start) from exc
        if not isinstance(value, dict):
            raise FormatError(f"{field} must be a JSON object", start)
        return value

    def array(self, count: int, dtype: str, field: str) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self._take(count * width, field), dtype=np.dtype(dtype)).copy()

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.offset} trailing bytes after {self.what}", self.offset
            )
