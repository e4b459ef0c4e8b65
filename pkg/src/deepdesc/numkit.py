"""Minimal differentiable kernels for the descriptor network.

Five layer kinds are supported (valid cross-correlation, 2x2 max-pool, tanh,
fully-connected, row-wise L2 normalisation). Every forward call returns the
output together with a cache; the matching backward call turns an upstream
gradient into the input gradient and, for parameterised layers, the
parameter gradients. All arithmetic is float64.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, DimensionError, NumericError

NORM_EPS = 1e-12


@dataclass
class Conv:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"conv weight {self.weight.shape} / bias {self.bias.shape} mismatch")
        if self.stride < 1:
            raise DimensionError("stride must be >= 1")

    @property
    def params(self):
        return [self.weight, self.bias]


@dataclass
class Linear:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"linear weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @property
    def params(self):
        return [self.weight, self.bias]


@dataclass
class MaxPool2:
    params: list = field(default_factory=list, init=False, repr=False)


@dataclass
class Tanh:
    params: list = field(default_factory=list, init=False, repr=False)


@dataclass
class L2Normalize:
    params: list = field(default_factory=list, init=False, repr=False)


def _conv_forward(layer, x):
    if x.ndim != 4:
        raise DimensionError(f"conv expects (B, C, H, W), got {x.shape}")
    out_ch, in_ch, kh, kw = layer.weight.shape
    b, c, h, w = x.shape
    if c != in_ch:
        raise DimensionError(f"conv expects {in_ch} input channels, got {c}")
    if h < kh or w < kw:
        raise DimensionError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
    s = layer.stride
    ho, wo = (h - kh) // s + 1, (w - kw) // s + 1
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw) -> rows per output pixel
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    out = cols @ layer.weight.reshape(out_ch, -1).T + layer.bias
    out = out.reshape(b, ho, wo, out_ch).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out, (x.shape, cols, out.shape)


def _conv_backward(layer, cache, g, input_grad):
    in_shape, cols, _ = cache
    out_ch, in_ch, kh, kw = layer.weight.shape
    b, _, ho, wo = g.shape
    g_rows = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, out_ch)
    d_weight = (g_rows.T @ cols).reshape(layer.weight.shape)
    d_bias = g_rows.sum(axis=0)
    dx = None
    if input_grad:
        s = layer.stride
        dcols = (g_rows @ layer.weight.reshape(out_ch, -1)).reshape(b, ho, wo, in_ch, kh, kw)
        dx = np.zeros(in_shape)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, [d_weight, d_bias]


def _pool_forward(x):
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"MaxPool2 needs (B, C, even H, even W), got {x.shape}")
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    # argmax returns the first maximum: row-major tie-break inside each block
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _pool_backward(cache, g):
    shape, arg = cache
    b, c, h, w = shape
    blocks = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    dx = blocks.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(shape)


def _linear_forward(layer, x):
    flat = x.reshape(x.shape[0], -1)
    out_dim, in_dim = layer.weight.shape
    if flat.shape[1] != in_dim:
        raise DimensionError(f"linear expects {in_dim} inputs, got {flat.shape[1]}")
    return flat @ layer.weight.T + layer.bias, (x.shape, flat)


def _l2_forward(x):
    if x.ndim != 2:
        raise DimensionError(f"L2Normalize expects (B, D), got {x.shape}")
    norm = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(norm < NORM_EPS)
    if bad.size:
        raise DegenerateInputError(
            f"L2Normalize on a vector of norm {norm[bad[0]]:.3g} (row {bad[0]})")
    y = x / norm[:, None]
    return y, (y, norm)


def layer_forward(layer, x):
    """Apply ``layer`` to a batch ``x`` and return ``(output, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(layer, Conv):
        return _conv_forward(layer, x)
    if isinstance(layer, MaxPool2):
        return _pool_forward(x)
    if isinstance(layer, Tanh):
        y = np.tanh(x)
        return y, y
    if isinstance(layer, Linear):
        return _linear_forward(layer, x)
    if isinstance(layer, L2Normalize):
        return _l2_forward(x)
    raise TypeError(f"unknown layer {layer!r}")


def _out_shape(layer, cache):
    if isinstance(layer, Conv):
        return cache[2]
    if isinstance(layer, MaxPool2):
        b, c, h, w = cache[0]
        return (b, c, h // 2, w // 2)
    if isinstance(layer, Tanh):
        return cache.shape
    if isinstance(layer, Linear):
        return (cache[1].shape[0], layer.weight.shape[0])
    return cache[0].shape


def layer_backward(layer, cache, g, input_grad=True):
    """Backpropagate the upstream gradient ``g`` through ``layer``.

    Returns ``(input_grad, param_grads)`` where ``param_grads`` is
    ``[d_weight, d_bias]`` for Conv/Linear and ``[]`` otherwise. Pass
    ``input_grad=False`` to skip the input gradient of a leading layer
    (``None`` is returned in its place).
    """
    g = np.asarray(g, dtype=np.float64)
    expected = _out_shape(layer, cache)
    if g.shape != tuple(expected):
        raise DimensionError(f"upstream gradient {g.shape} != forward output {tuple(expected)}")
    if isinstance(layer, Conv):
        return _conv_backward(layer, cache, g, input_grad)
    if isinstance(layer, MaxPool2):
        return _pool_backward(cache, g), []
    if isinstance(layer, Tanh):
        return g * (1.0 - cache * cache), []
    if isinstance(layer, Linear):
        in_shape, flat = cache
        d_weight = g.T @ flat
        d_bias = g.sum(axis=0)
        dx = (g @ layer.weight).reshape(in_shape) if input_grad else None
        return dx, [d_weight, d_bias]
    if isinstance(layer, L2Normalize):
        y, norm = cache
        # (I - y y^T) / |x| applied row-wise
        dx = (g - y * np.einsum("ij,ij->i", y, g)[:, None]) / norm[:, None]
        return dx, []
    raise TypeError(f"unknown layer {layer!r}")


@dataclass
class SGDState:
    """Per-parameter momentum buffers and the SGD hyperparameters."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if min(self.lr, self.momentum, self.weight_decay) < 0:
            raise ValueError("SGD hyperparameters must be nonnegative")


def sgd_step(params, grads, state):
    """One in-place SGD update with momentum and L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * param)``;
    ``param <- param - lr * v``. Velocities are created lazily on the first
    call. Raises :class:`NumericError` before touching anything if a gradient
    has a non-finite entry.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter array {i}")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    for i, (v, p) in enumerate(zip(state.velocity, params)):
        if v.shape != p.shape:
            raise DimensionError(f"velocity {i}: shape {v.shape} vs param {p.shape}")
    for p, g, v in zip(params, grads, state.velocity):
        v *= state.momentum
        v += g + state.weight_decay * p
        p -= state.lr * v
    return params, state


def finite_difference_gradient(f, point, step=1e-6, indices=None):
    """Central finite-difference gradient of scalar ``f`` at ``point``.

    ``f`` is called as ``f(point)`` while ``point`` is perturbed in place one
    coordinate at a time (and restored afterwards), so a closure over arrays
    that alias ``point`` also works. With ``indices`` (flat
    positions) only those coordinates are estimated and a 1-D array in the
    same order is returned; otherwise the full gradient array is returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    flat = point.reshape(-1)
    if not np.shares_memory(flat, point):
        raise ValueError("point must be a contiguous array")
    todo = range(flat.size) if indices is None else indices
    out = np.empty(len(todo))
    for n, idx in enumerate(todo):
        orig = flat[idx]
        flat[idx] = orig + step
        up = f(point)
        flat[idx] = orig - step
        down = f(point)
        flat[idx] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite function value near coordinate {idx}")
        out[n] = (up - down) / (2.0 * step)
    return out.reshape(point.shape) if indices is None else out


def max_relative_error(analytic, numeric):
    """Max of |a - n| / max(1, |a|) over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
