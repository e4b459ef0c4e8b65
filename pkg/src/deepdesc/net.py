"""Shallow two-convolution descriptor network and its DFWT persistence.

Layer sequence (input 1x32x32):

    Conv 32@7x7 -> Tanh -> MaxPool2 -> Conv 64@6x6 -> Tanh
    -> Linear 4096->128 -> Tanh -> L2Normalize

Shape chain: 1x32x32 -> 32x26x26 -> 32x13x13 -> 64x8x8 -> 4096 -> 128.
"""
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import numkit
from .binio import Reader, atomic_write, pack_f32, pack_u32, read_bytes
from .errors import DegenerateInputError, DimensionError, FormatError
from .numkit import Conv, L2Normalize, Linear, MaxPool2, Tanh

logger = logging.getLogger(__name__)

PATCH_SIZE = 32
DESCRIPTOR_DIM = 128
ARCH_TFEAT = 1
# Inference always runs in blocks of this many patches so every patch sees
# the same BLAS call shapes; batched and single-patch results are then
# bitwise identical.
INFERENCE_CHUNK = 32

_MAGIC = b"DFWT"
_KIND_CONV, _KIND_LINEAR = 0, 1


@dataclass
class Model:
    layers: list
    arch: int = ARCH_TFEAT
    seed: int | None = None

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def param_count(self):
        return sum(p.size for p in self.params)

    def copy(self):
        return _assemble([p.copy() for p in self.params], self.arch, self.seed)


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _assemble(params, arch=ARCH_TFEAT, seed=None):
    if arch != ARCH_TFEAT:
        raise FormatError(f"unknown architecture tag {arch}")
    w1, b1, w2, b2, w3, b3 = params
    layers = [
        Conv(w1, b1), Tanh(), MaxPool2(),
        Conv(w2, b2), Tanh(),
        Linear(w3, b3), Tanh(), L2Normalize(),
    ]
    return Model(layers, arch, seed)


def build_model(seed: int) -> Model:
    """Fresh network with Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    # fan_in/fan_out for convs count the receptive field on both sides
    w1 = _glorot(rng, (32, 1, 7, 7), 1 * 49, 32 * 49)
    w2 = _glorot(rng, (64, 32, 6, 6), 32 * 36, 64 * 36)
    w3 = _glorot(rng, (DESCRIPTOR_DIM, 4096), 4096, DESCRIPTOR_DIM)
    params = [w1, np.zeros(32), w2, np.zeros(64), w3, np.zeros(DESCRIPTOR_DIM)]
    return _assemble(params, ARCH_TFEAT, seed)


def _as_batch(patches):
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1:] != (1, PATCH_SIZE, PATCH_SIZE):
        raise DimensionError(f"patches must be 32x32, got batch shape {x.shape}")
    return x


def forward(model, patches):
    """Training forward pass; returns descriptors and the per-layer caches."""
    x = _as_batch(patches)
    caches = []
    for layer in model.layers:
        x, cache = numkit.layer_forward(layer, x)
        caches.append(cache)
    return x, caches


def backward(model, caches, grad_out):
    """Parameter gradients (ordered like ``model.params``) for ``d loss / d output``."""
    g = grad_out
    grads = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        g, pg = numkit.layer_backward(layer, caches[i], g, input_grad=i > 0)
        grads[:0] = pg
    return grads


def describe_batch(model, patches):
    """128-D unit descriptors for a batch of 32x32 patches, shape (N, 128)."""
    x = _as_batch(patches)
    n = x.shape[0]
    if n == 0:
        raise DimensionError("describe_batch needs at least one patch")
    out = np.empty((n, DESCRIPTOR_DIM))
    for start in range(0, n, INFERENCE_CHUNK):
        block = x[start:start + INFERENCE_CHUNK]
        real = block.shape[0]
        if real < INFERENCE_CHUNK:
            pad = np.repeat(block[-1:], INFERENCE_CHUNK - real, axis=0)
            block = np.concatenate([block, pad])
        h = block
        for layer in model.layers[:-1]:
            h, _ = numkit.layer_forward(layer, h)
        h = h[:real]
        try:
            y, _ = numkit.layer_forward(model.layers[-1], h)
        except DegenerateInputError:
            norms = np.linalg.norm(h, axis=1)
            bad = start + int(np.flatnonzero(norms < numkit.NORM_EPS)[0])
            raise DegenerateInputError(
                f"patch {bad}: pre-normalisation descriptor has zero norm") from None
        out[start:start + real] = y
    return out


def describe_patch(model, patch):
    return describe_batch(model, patch)[0]


def round_to_f32(model):
    """Copy of ``model`` whose parameters are rounded to float32 precision."""
    params = [p.astype(np.float32).astype(np.float64) for p in model.params]
    return _assemble(params, model.arch, model.seed)


def serialize_model(model) -> bytes:
    parts = [_MAGIC, pack_u32(1), struct.pack("<B", model.arch)]
    weighted = [layer for layer in model.layers if layer.params]
    parts.append(pack_u32(len(weighted)))
    for layer in weighted:
        kind = _KIND_CONV if isinstance(layer, Conv) else _KIND_LINEAR
        parts.append(struct.pack("<B", kind))
        parts.append(pack_u32(*layer.weight.shape))
        parts.append(pack_f32(layer.weight))
        parts.append(pack_f32(layer.bias))
    return b"".join(parts)


def deserialize_model(data: bytes) -> Model:
    r = Reader(data)
    r.magic(_MAGIC)
    r.version(1)
    arch = r.u8("architecture tag")
    if arch != ARCH_TFEAT:
        raise FormatError(f"unknown architecture tag {arch}", r.pos - 1)
    expected = [(_KIND_CONV, (32, 1, 7, 7)), (_KIND_CONV, (64, 32, 6, 6)),
                (_KIND_LINEAR, (DESCRIPTOR_DIM, 4096))]
    at = r.pos
    count = r.u32("layer count")
    if count != len(expected):
        raise FormatError(f"architecture needs {len(expected)} weighted layers, file has {count}", at)
    params = []
    for kind, shape in expected:
        at = r.pos
        got_kind = r.u8("layer kind")
        if got_kind != kind:
            raise FormatError(f"layer kind {got_kind}, expected {kind}", at)
        at = r.pos
        dims = tuple(r.u32("layer dims") for _ in shape)
        if dims != shape:
            raise FormatError(f"layer dims {dims}, expected {shape}", at)
        params.append(r.f32(int(np.prod(shape)), "weights").reshape(shape))
        params.append(r.f32(shape[0], "bias"))
    r.finish()
    return _assemble(params, arch)


def save_model(model, path):
    atomic_write(path, serialize_model(model))


def load_model(path) -> Model:
    return deserialize_model(read_bytes(path))
