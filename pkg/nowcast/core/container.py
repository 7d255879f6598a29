"""
Little-endian binary containers
Shared framing for the weights (NWW1), mosaic (VIL1), dataset (NWC1) and
checkpoint (NWC-CKPT1) files: magic, u16 version, then typed fields
"""

import struct
from typing import Iterable, Sequence, Tuple

import numpy as np

from .errors import BadMagic, PayloadMismatch, TruncatedFile, UnsupportedVersion


class ContainerWriter:
    """Accumulates a container in memory"""

    def __init__(self, magic: bytes, version: int):
        self._parts = [magic, struct.pack('<H', version)]

    def _pack(self, fmt: str, value):
        self._parts.append(struct.pack(fmt, value))
        return self

    def u8(self, value: int):
        return self._pack('<B', value)

    def u16(self, value: int):
        return self._pack('<H', value)

    def u32(self, value: int):
        return self._pack('<I', value)

    def u64(self, value: int):
        return self._pack('<Q', value)

    def i64(self, value: int):
        return self._pack('<q', value)

    def f64(self, value: float):
        return self._pack('<d', value)

    def string(self, text: str):
        encoded = text.encode('utf-8')
        self.u16(len(encoded))
        self._parts.append(encoded)
        return self

    def blob(self, data: bytes):
        self.u64(len(data))
        self._parts.append(data)
        return self

    def array(self, values: np.ndarray, dtype: str):
        """Row-major payload in the given little-endian dtype ('<f4', '<f8', 'u1')"""
        self._parts.append(np.ascontiguousarray(values, dtype=np.dtype(dtype)).tobytes())
        return self

    def getvalue(self) -> bytes:
        return b''.join(self._parts)


class ContainerReader:
    """Sequential reader that turns short reads into TruncatedFile"""

    def __init__(self, data: bytes, magic: bytes, versions: Iterable[int], source: str = '<bytes>'):
        self.data = data
        self.source = source
        self.pos = 0
        found = self.take(len(magic))
        if found != magic:
            raise BadMagic(f"{source}: expected magic {magic!r}, found {found!r}")
        self.version = self.u16()
        if self.version not in tuple(versions):
            raise UnsupportedVersion(f"{source}: unsupported version {self.version}")

    def take(self, count: int) -> bytes:
        end = self.pos + count
        if end > len(self.data):
            raise TruncatedFile(
                f"{self.source}: needed {count} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def _unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def u8(self) -> int:
        return self._unpack('<B')

    def u16(self) -> int:
        return self._unpack('<H')

    def u32(self) -> int:
        return self._unpack('<I')

    def u64(self) -> int:
        return self._unpack('<Q')

    def i64(self) -> int:
        return self._unpack('<q')

    def f64(self) -> float:
        return self._unpack('<d')

    def string(self) -> str:
        return self.take(self.u16()).decode('utf-8')

    def blob(self) -> bytes:
        return self.take(self.u64())

    def array(self, shape: Sequence[int], dtype: str) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(tuple(shape)).copy()

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def expect_end(self):
        if self.remaining:
            raise PayloadMismatch(f"{self.source}: {self.remaining} unexpected trailing bytes")


def float_code(dtype) -> Tuple[int, str]:
    """Element size byte and little-endian dtype string for a float dtype"""
    dt = np.dtype(dtype)
    if dt == np.float32:
        return 4, '<f4'
    if dt == np.float64:
        return 8, '<f8'
    raise ValueError(f"unsupported float dtype {dt}")


def float_dtype(code: int) -> str:
    if code == 4:
        return '<f4'
    if code == 8:
        return '<f8'
    raise PayloadMismatch(f"unknown float element size {code}")
