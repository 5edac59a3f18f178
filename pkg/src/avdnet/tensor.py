"""Dense tensor primitives with hand-derived gradients.

Public tensors are numpy arrays laid out ``(batch, channels, height, width)``;
rank-3 inputs ``(channels, height, width)`` are accepted and returned with
the same rank.  Convolution is cross-correlation (no kernel flip).

The kernels themselves work channels-last (``*_nhwc`` functions): im2col
rows then come out contiguous and every GEMM runs without transposes.  The
network keeps its activations in that layout between layers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.1
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99

# im2col buffers above this many elements are processed in row bands
_COL_LIMIT = 1 << 24
# forward GEMMs run on row blocks of one fixed height: BLAS reduction order
# then never depends on the output extent, which keeps stride-2 output and
# batched output bit-identical to their stride-1 / single-image counterparts
_GEMM_BLOCK = 64


class ShapeError(ValueError):
    """Raised when tensor extents do not line up."""


@dataclass
class ConvParams:
    """Weights ``(out, in, k, k)``; ``bias`` is None when a batch norm follows."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"conv weights must be (d, C, h, h), got {self.weights.shape}")
        if self.weights.shape[2] % 2 != 1:
            raise ShapeError(f"kernel size must be odd, got {self.weights.shape[2]}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    def matrix(self) -> np.ndarray:
        """Weights as a ``(k*k*C, d)`` matrix matching channels-last im2col rows."""
        w = self.weights
        return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(-1, w.shape[0])


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, d: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            scale=np.ones(d, dtype),
            shift=np.zeros(d, dtype),
            running_mean=np.zeros(d, dtype),
            running_var=np.ones(d, dtype),
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    train: bool = True


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ShapeError(
            f"non-positive output extent {out} for size={size}, kernel={kernel}, "
            f"stride={stride}, padding={padding}"
        )
    return out


def _as4d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a rank-3 or rank-4 tensor, got rank {x.ndim}")


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _check_channels(c: int, params: ConvParams) -> None:
    if c != params.in_channels:
        raise ShapeError(
            f"channel mismatch: conv expects {params.in_channels} input channels, got {c}"
        )


def _blocked_matmul(rows: np.ndarray, wmat: np.ndarray) -> np.ndarray:
    """``rows @ wmat`` for an ``(n, K)`` operand using fixed-height GEMM calls."""
    n, kdim = rows.shape
    t = _GEMM_BLOCK
    nb = -(-n // t)
    if nb * t != n:
        padded = np.zeros((nb * t, kdim), rows.dtype)
        padded[:n] = rows
        rows = padded
    out = np.matmul(rows.reshape(nb, t, kdim), wmat)
    return out.reshape(nb * t, wmat.shape[1])[:n]


def _row_bands(b: int, kdim: int, ho: int, wo: int):
    step = max(1, _COL_LIMIT // max(1, b * kdim * wo))
    for r0 in range(0, ho, step):
        yield r0, min(ho, r0 + step)


def _im2col_nhwc(xp: np.ndarray, k: int, s: int, r0: int, r1: int, wo: int) -> np.ndarray:
    """Rows ``(B*(r1-r0)*wo, k*k*C)`` for output rows ``r0:r1``."""
    b, _, _, c = xp.shape
    band = xp[:, s * r0 : s * (r1 - 1) + k, : s * (wo - 1) + k]
    win = sliding_window_view(band, (k, k), axis=(1, 2))[:, ::s, ::s]
    # (B, rows, wo, C, k, k) -> (B, rows, wo, k, k, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(-1, k * k * c)


def _pad_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c), x.dtype)
    xp[:, p : p + h, p : p + w] = x
    return xp


def conv_nhwc(x: np.ndarray, params: ConvParams, wmat: Optional[np.ndarray] = None) -> np.ndarray:
    b, h, w, c = x.shape
    _check_channels(c, params)
    k, s, p = params.kernel, params.stride, params.padding
    ho = conv_output_size(h, k, s, p)
    wo = conv_output_size(w, k, s, p)
    d = params.out_channels
    if wmat is None:
        wmat = params.matrix()
    wmat = wmat.astype(np.result_type(x.dtype, wmat.dtype), copy=False)
    if k == 1 and p == 0:
        xs = x[:, ::s, ::s] if s > 1 else x
        out = _blocked_matmul(np.ascontiguousarray(xs).reshape(-1, c), wmat).reshape(b, ho, wo, d)
    else:
        xp = _pad_nhwc(x, p)
        out = np.empty((b, ho, wo, d), wmat.dtype)
        for r0, r1 in _row_bands(b, wmat.shape[0], ho, wo):
            cols = _im2col_nhwc(xp, k, s, r0, r1, wo)
            out[:, r0:r1] = _blocked_matmul(cols, wmat).reshape(b, r1 - r0, wo, d)
    if params.bias is not None:
        out = out + params.bias
    return out


def conv_nhwc_backward(grad: np.ndarray, x: np.ndarray, params: ConvParams,
                       wmat: Optional[np.ndarray] = None):
    b, h, w, c = x.shape
    _check_channels(c, params)
    k, s, p = params.kernel, params.stride, params.padding
    ho = conv_output_size(h, k, s, p)
    wo = conv_output_size(w, k, s, p)
    d = params.out_channels
    if grad.shape != (b, ho, wo, d):
        raise ShapeError(
            f"grad_out shape {(b, d, ho, wo)} expected, got {(grad.shape[0], grad.shape[3]) + grad.shape[1:3]}"
        )
    if wmat is None:
        wmat = params.matrix()
    grad_bias = None if params.bias is None else grad.sum(axis=(0, 1, 2))
    dtype = np.result_type(grad.dtype, wmat.dtype)

    if k == 1 and p == 0:
        xs = np.ascontiguousarray(x[:, ::s, ::s] if s > 1 else x).reshape(-1, c)
        gflat = grad.reshape(-1, d)
        gw = xs.T @ gflat
        gx_s = (gflat @ wmat.T).reshape(b, ho, wo, c)
        if s > 1:
            gx = np.zeros((b, h, w, c), dtype)
            gx[:, ::s, ::s] = gx_s
        else:
            gx = gx_s
    else:
        xp = _pad_nhwc(x, p)
        gxp = np.zeros(xp.shape, dtype)
        gw = np.zeros(wmat.shape, dtype)
        for r0, r1 in _row_bands(b, wmat.shape[0], ho, wo):
            rows = r1 - r0
            gband = np.ascontiguousarray(grad[:, r0:r1]).reshape(-1, d)
            cols = _im2col_nhwc(xp, k, s, r0, r1, wo)
            gw += cols.T @ gband
            gcols = (gband @ wmat.T).reshape(b, rows, wo, k, k, c)
            for i in range(k):
                y0 = s * r0 + i
                for j in range(k):
                    gxp[:, y0 : y0 + s * (rows - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[:, :, :, i, j]
        gx = gxp[:, p : p + h, p : p + w] if p else gxp
    # (k, k, C, d) -> (d, C, k, k)
    grad_w = np.ascontiguousarray(gw.reshape(k, k, c, d).transpose(3, 2, 0, 1))
    return gx, grad_w, grad_bias


def bn_nhwc(x: np.ndarray, bn: BatchNormParams, mode: str = "infer", update_stats: bool = True):
    if x.shape[-1] != bn.channels:
        raise ShapeError(f"batch norm expects {bn.channels} channels, got {x.shape[-1]}")
    if mode == "train":
        flat = x.reshape(-1, x.shape[-1])
        mean = flat.mean(axis=0, dtype=np.float64)
        var = np.mean(np.square(flat - mean.astype(x.dtype), dtype=np.float64), axis=0)
        if update_stats:
            m = bn.momentum
            bn.running_mean[:] = m * bn.running_mean + (1 - m) * mean
            bn.running_var[:] = m * bn.running_var + (1 - m) * var
        mean = mean.astype(x.dtype)
        var = var.astype(x.dtype)
    elif mode == "infer":
        mean, var = bn.running_mean, bn.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + bn.epsilon)).astype(x.dtype)
    xhat = (x - mean) * inv_std
    out = xhat * bn.scale + bn.shift
    return out, BatchNormCache(xhat=xhat, inv_std=inv_std, train=(mode == "train"))


def bn_nhwc_backward(grad: np.ndarray, cache: BatchNormCache, bn: BatchNormParams):
    c = grad.shape[-1]
    g = grad.reshape(-1, c)
    xhat = cache.xhat.reshape(-1, c)
    grad_shift = g.sum(axis=0)
    grad_scale = (g * xhat).sum(axis=0)
    if cache.train:
        n = g.shape[0]
        k = bn.scale * cache.inv_std
        gx = k * (g - grad_shift / n - xhat * (grad_scale / n))
    else:
        gx = g * (bn.scale * cache.inv_std)
    return gx.reshape(grad.shape), grad_scale, grad_shift


# ---------------------------------------------------------------------------
# channels-first public API
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    x4, squeeze = _as4d(x)
    _check_channels(x4.shape[1], params)
    out = to_nchw(conv_nhwc(to_nhwc(x4), params))
    return out[0] if squeeze else out


def conv2d_backward(grad_out: np.ndarray, saved_input: np.ndarray, params: ConvParams):
    """Return ``(grad_input, grad_weights, grad_bias)``.

    ``grad_bias`` is None when the conv carries no bias.
    """
    x4, squeeze = _as4d(saved_input)
    g4, _ = _as4d(grad_out)
    _check_channels(x4.shape[1], params)
    gx, gw, gb = conv_nhwc_backward(to_nhwc(g4), to_nhwc(x4), params)
    gx = to_nchw(gx)
    return (gx[0] if squeeze else gx), gw, gb


def batchnorm_forward(x: np.ndarray, bn: BatchNormParams, mode: str = "infer", update_stats: bool = True):
    """Per-channel normalization; returns ``(out, cache)``.

    ``train`` normalizes with batch statistics over (batch, height, width)
    and, unless ``update_stats`` is False, blends them into the running
    statistics in place with weight ``momentum`` on the old value.
    ``infer`` uses the running statistics.
    """
    x4, squeeze = _as4d(x)
    if x4.shape[1] != bn.channels:
        raise ShapeError(f"batch norm expects {bn.channels} channels, got {x4.shape[1]}")
    out, cache = bn_nhwc(to_nhwc(x4), bn, mode, update_stats)
    out = to_nchw(out)
    return (out[0] if squeeze else out), cache


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache, bn: BatchNormParams):
    """Return ``(grad_input, grad_scale, grad_shift)`` for a cache from :func:`batchnorm_forward`."""
    g4, squeeze = _as4d(grad_out)
    gx, gs, gb = bn_nhwc_backward(to_nhwc(g4), cache, bn)
    gx = to_nchw(gx)
    return (gx[0] if squeeze else gx), gs, gb


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if 0 <= slope <= 1:
        return np.maximum(x, x * slope)
    return np.where(x >= 0, x, x * slope)


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, grad_out, grad_out * slope)


def add_elementwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return a + b
