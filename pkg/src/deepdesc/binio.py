"""Little-endian binary reading/writing helpers with offset-aware errors."""
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError


class Reader:
    """Sequential reader over a bytes buffer; every failure reports the offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def magic(self, expected: bytes):
        got = self._take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", self.pos - len(expected))

    def u8(self, what="u8"):
        return self._take(1, what)[0]

    def u32(self, what="u32"):
        return struct.unpack("<I", self._take(4, what))[0]

    def f32(self, count, what="f32 array"):
        raw = self._take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def raw(self, count, what="bytes"):
        return self._take(count, what)

    def version(self, expected=1):
        start = self.pos
        v = self.u32("version")
        if v != expected:
            raise FormatError(f"unsupported version {v}", start)

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


def pack_u32(*values):
    return struct.pack(f"<{len(values)}I", *values)


def pack_f32(array):
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def atomic_write(path, data: bytes):
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()
