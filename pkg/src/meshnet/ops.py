"""Volumetric network operations with explicit backward passes.

All tensors are batched float64 arrays of shape (B, C, D, H, W).  Parameters
may be stored as float32; they are promoted before any accumulation so every
reduction runs in 64-bit.

Convolution follows the dilated volumetric convolution

    out[o, z, y, x] = b[o] + sum_i sum_{zb, yb, xb} k[o, i, zb, yb, xb]
                      * f[i, z - l*zb, y - l*yb, x - l*xb]

with kernel offsets zb in [-c, c] etc., i.e. a true (flipped) convolution and
not a cross-correlation.  Outside the input the signal is zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, InvalidProbability, NonDivisibleDims, ShapeMismatch

# upper bound on the temporary column buffer of one conv chunk
_COLS_BYTES = 64 * 2**20


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5:
        raise ShapeMismatch(f"expected (B, C, D, H, W) or (C, D, H, W), got shape {x.shape}")
    return x


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise InvalidConfig(f"expected 3 values, got {v}")
    return v


@dataclass(frozen=True)
class ConvConfig:
    dilation: int = 1
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.dilation < 1:
            raise InvalidConfig(f"dilation must be >= 1, got {self.dilation}")
        if min(self.padding) < 0:
            raise InvalidConfig(f"padding must be >= 0, got {self.padding}")


def conv_output_dims(dims, extent, cfg: ConvConfig) -> tuple[int, int, int]:
    return tuple(d + 2 * p - cfg.dilation * (k - 1) for d, k, p in zip(dims, extent, cfg.padding))


def _check_kernel(weight: np.ndarray, bias) -> None:
    if weight.ndim != 5:
        raise ShapeMismatch(f"kernel must be (Co, Ci, kz, ky, kx), got {weight.shape}")
    if any(k < 1 or k % 2 == 0 for k in weight.shape[2:]):
        raise InvalidConfig(f"kernel extents must be odd and >= 1, got {weight.shape[2:]}")
    if bias is not None and np.shape(bias) != (weight.shape[0],):
        raise ShapeMismatch(f"bias must have shape ({weight.shape[0]},), got {np.shape(bias)}")


def _conv_padded(xp: np.ndarray, w: np.ndarray, dil: int, out_dims) -> np.ndarray:
    """Valid dilated convolution of one padded sample xp (Ci, Dp, Hp, Wp).

    The (y, x) taps are unrolled into a column buffer; the z taps become
    strided views into that buffer along the flattened (z, y, x) axis, so
    each z tap is a single GEMM with no further copy.
    """
    co, ci, kz, ky, kx = w.shape
    do, ho, wo = out_dims
    plane = ho * wo
    wz = [np.ascontiguousarray(w[:, :, j].reshape(co, ci * ky * kx)) for j in range(kz)]
    out = np.empty((co, do * plane))
    span_z = dil * (kz - 1)
    row_bytes = ci * ky * kx * plane * 8
    step = max(1, min(do, _COLS_BYTES // max(row_bytes, 1) - span_z))
    for z0 in range(0, do, step):
        nz = min(step, do - z0)
        cols = np.empty((ci, ky, kx, nz + span_z, ho, wo))
        for jy in range(ky):
            sy = dil * (ky - 1 - jy)
            for jx in range(kx):
                sx = dil * (kx - 1 - jx)
                cols[:, jy, jx] = xp[:, z0:z0 + nz + span_z, sy:sy + ho, sx:sx + wo]
        cols = cols.reshape(ci * ky * kx, -1)
        acc = out[:, z0 * plane:(z0 + nz) * plane]
        acc[...] = 0.0
        for jz in range(kz):
            off = dil * (kz - 1 - jz) * plane
            acc += wz[jz] @ cols[:, off:off + nz * plane]
    return out.reshape(co, do, ho, wo)


def _pad(x: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, ((0, 0),) + tuple((p, p) for p in pad))


def conv3d_forward(x, weight, bias=None, cfg: ConvConfig = ConvConfig()) -> np.ndarray:
    x = _as_batch(x)
    weight = np.asarray(weight, dtype=np.float64)
    _check_kernel(weight, bias)
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    out_dims = conv_output_dims(x.shape[2:], weight.shape[2:], cfg)
    if min(out_dims) <= 0:
        raise InvalidConfig(f"conv output dims {out_dims} not positive for input {x.shape[2:]}")
    out = np.empty((x.shape[0], weight.shape[0]) + out_dims)
    for b in range(x.shape[0]):
        out[b] = _conv_padded(_pad(x[b], cfg.padding), weight, cfg.dilation, out_dims)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1, 1)
    return out


def conv3d_backward(grad_out, saved_input, weight, cfg: ConvConfig = ConvConfig(), need_input_grad=True):
    """Returns (grad_input, grad_weight, grad_bias); grad_input is None if not requested."""
    x = _as_batch(saved_input)
    g = _as_batch(grad_out)
    weight = np.asarray(weight, dtype=np.float64)
    _check_kernel(weight, None)
    co, ci, kz, ky, kx = weight.shape
    out_dims = conv_output_dims(x.shape[2:], weight.shape[2:], cfg)
    if g.shape != (x.shape[0], co) + out_dims:
        raise ShapeMismatch(f"grad_out shape {g.shape} does not match forward output {(x.shape[0], co) + out_dims}")
    dil = cfg.dilation
    do, ho, wo = out_dims
    plane = ho * wo
    span_z = dil * (kz - 1)

    grad_bias = g.sum(axis=(0, 2, 3, 4))
    gw = np.zeros((kz, co, ci * ky * kx))
    row_bytes = ci * ky * kx * plane * 8
    step = max(1, min(do, _COLS_BYTES // max(row_bytes, 1) - span_z))
    for b in range(x.shape[0]):
        xp = _pad(x[b], cfg.padding)
        gb = g[b].reshape(co, -1)
        for z0 in range(0, do, step):
            nz = min(step, do - z0)
            cols = np.empty((ci, ky, kx, nz + span_z, ho, wo))
            for jy in range(ky):
                sy = dil * (ky - 1 - jy)
                for jx in range(kx):
                    sx = dil * (kx - 1 - jx)
                    cols[:, jy, jx] = xp[:, z0:z0 + nz + span_z, sy:sy + ho, sx:sx + wo]
            cols = cols.reshape(ci * ky * kx, -1)
            gchunk = gb[:, z0 * plane:(z0 + nz) * plane]
            for jz in range(kz):
                off = dil * (kz - 1 - jz) * plane
                gw[jz] += gchunk @ cols[:, off:off + nz * plane].T
    grad_weight = gw.reshape(kz, co, ci, ky, kx).transpose(1, 2, 0, 3, 4).copy()

    grad_input = None
    if need_input_grad:
        # transposed conv == conv of grad_out with the flipped, channel-swapped kernel
        wt = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        full = tuple(dil * (k - 1) for k in weight.shape[2:])
        back_pad = tuple(f - p for f, p in zip(full, cfg.padding))
        if min(back_pad) >= 0:
            grad_input = conv3d_forward(g, wt, None, ConvConfig(dil, back_pad))
        else:
            gxp = conv3d_forward(g, wt, None, ConvConfig(dil, full))
            (pz, py, px), (d, h, w) = cfg.padding, x.shape[2:]
            grad_input = np.ascontiguousarray(gxp[:, :, pz:pz + d, py:py + h, px:px + w])
    return grad_input, grad_weight, grad_bias


# --- activations -----------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(grad_out, y):
    return grad_out * (1.0 - y * y)


def softmax_forward(logits, axis=1):
    """Voxel-wise softmax across the channel axis, max-shifted for stability."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out, probs, axis=1):
    return probs * (grad_out - (grad_out * probs).sum(axis=axis, keepdims=True))


# --- dropout ----------------------------------------------------------------

def dropout_forward(x, p: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout, element-wise.  Returns (output, mask); mask is None in eval mode."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    keep = rng.random(x.shape) >= p
    mask = keep / (1.0 - p)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


# --- batch normalization ----------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, np.float32),
            beta=np.zeros(channels, np.float32),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
            momentum=momentum,
            eps=eps,
        )


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    invstd: np.ndarray
    gamma: np.ndarray
    train: bool = field(default=True)


def batchnorm_forward(x, state: BatchNormState, train: bool):
    """Per-channel normalization over batch and spatial axes.

    In train mode the running statistics in ``state`` are updated in place
    (unbiased variance, exponential moving average with ``momentum``).
    """
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    gamma = np.asarray(state.gamma, np.float64)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[1]
        m = state.momentum
        unbiased = var * n / max(n - 1, 1)
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    else:
        mean = np.asarray(state.running_mean, np.float64)
        var = np.asarray(state.running_var, np.float64)
    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean.reshape(shape)) * invstd.reshape(shape)
    y = xhat * gamma.reshape(shape) + np.asarray(state.beta, np.float64).reshape(shape)
    return y, BatchNormCache(xhat, invstd, gamma, train)


def batchnorm_backward(grad_out, cache: BatchNormCache):
    """Returns (grad_input, grad_gamma, grad_beta)."""
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    grad_gamma = (grad_out * cache.xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    scale = (cache.gamma * cache.invstd).reshape(shape)
    if not cache.train:
        return grad_out * scale, grad_gamma, grad_beta
    n = grad_out.size // grad_out.shape[1]
    grad_input = scale / n * (
        n * grad_out - grad_beta.reshape(shape) - cache.xhat * grad_gamma.reshape(shape)
    )
    return grad_input, grad_gamma, grad_beta


# --- pooling and upsampling -------------------------------------------------

def maxpool3d_forward(x):
    """2x2x2 max-pooling with stride 2.  Returns (output, argmax within each block)."""
    b, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise NonDivisibleDims(f"maxpool needs even dims, got {(d, h, w)}")
    blocks = x.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(b, c, d // 2, h // 2, w // 2, 8)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool3d_backward(grad_out, argmax):
    b, c, d, h, w = grad_out.shape
    blocks = np.zeros((b, c, d, h, w, 8))
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(b, c, d, h, w, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return blocks.reshape(b, c, 2 * d, 2 * h, 2 * w)


def upsample3d_forward(x):
    """Nearest-neighbour 2x upsampling along every spatial axis."""
    return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)


def upsample3d_backward(grad_out):
    b, c, d, h, w = grad_out.shape
    return grad_out.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(3, 5, 7))
