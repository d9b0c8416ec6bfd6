"""Little-endian binary helpers shared by the MXCM, MXDS and MXRM containers."""
import struct

import numpy as np

from errors import FormatError


class ByteReader:
    """Sequential reader that turns short reads into FormatError."""

    def __init__(self, payload: bytes, source: str = "<bytes>"):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if count < 0 or end > len(self.payload):
            raise FormatError(
                f"{self.source}: truncated at byte {self.offset} (needed {count} more, "
                f"{len(self.payload) - self.offset} left)"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def magic(self, expected: bytes):
        found = self.take(len(expected))
        if found != expected:
            raise FormatError(f"{self.source}: bad magic {found!r}, expected {expected!r}")

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()

    def expect_end(self):
        if self.offset != len(self.payload):
            raise FormatError(f"{self.source}: {len(self.payload) - self.offset} trailing bytes")


def pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def pack_u64(value: int) -> bytes:
    return struct.pack("<Q", value)
