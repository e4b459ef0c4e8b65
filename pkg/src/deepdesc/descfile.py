"""DFDS descriptor files: magic, version, count, dim, then float32 rows."""
import numpy as np

from .binio import Reader, atomic_write, pack_f32, pack_u32, read_bytes
from .errors import FormatError


def serialize_descriptors(desc) -> bytes:
    desc = np.asarray(desc)
    if desc.ndim != 2:
        raise ValueError("descriptors must be a 2-D array")
    return b"DFDS" + pack_u32(1, desc.shape[0], desc.shape[1]) + pack_f32(desc)


def deserialize_descriptors(data: bytes) -> np.ndarray:
    r = Reader(data)
    r.magic(b"DFDS")
    r.version(1)
    count = r.u32("count")
    at = r.pos
    dim = r.u32("dim")
    if dim == 0:
        raise FormatError("descriptor dimension must be positive", at)
    values = r.f32(count * dim, "descriptor values")
    r.finish()
    return values.reshape(count, dim)


def write_descriptors(path, desc):
    atomic_write(path, serialize_descriptors(desc))


def read_descriptors(path) -> np.ndarray:
    return deserialize_descriptors(read_bytes(path))
