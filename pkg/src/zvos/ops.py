"""Structured tensor operations: convolution, bilinear resampling, adaptive
pooling, channel concatenation, and the affine head.

Convolution runs as im2col + one BLAS matmul; resampling and pooling are
separable row/column matrices so forward and backward are plain matrix
products. Everything is differentiable through the closure mechanism in
autodiff.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, _node
from .errors import ConfigError, DimensionError

GLOBAL = "global"  # pyramid_pool sentinel for the 1x1 (whole-map) bin


def _require_bchw(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{op}: expected a (B, C, H, W) tensor, got shape {x.data.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over a BCHW tensor with a square OIKK kernel."""
    _require_bchw(x, "conv2d")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d: weight must be (O, I, K, K), got shape {weight.data.shape}")
    o, i, kh, kw = weight.data.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw}")
    b, c, h, w = x.data.shape
    if c != i:
        raise DimensionError(f"conv2d: input has {c} channels but weight expects {i}")
    if bias.data.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.data.shape} != ({o},)")
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d: padding must be >= 0, got {padding}")
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(
            f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        raise ConfigError(
            f"conv2d: output size for input {h}x{w}, kernel {k}, stride {stride}, "
            f"padding {padding} is not integral")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    if k == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w_mat = weight.data.reshape(o, c * k * k)
    out_mat = cols @ w_mat.T
    out_mat += bias.data
    out_data = np.ascontiguousarray(out_mat.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))
    del cols  # rebuilt on demand in backward; retaining it would hold
    # O(B*H*W*C*K^2) per conv for the whole life of the graph

    out = _node(out_data, x, weight, bias)
    if out._prev:
        def _bw(g):
            g_mat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
            if weight.requires_grad:
                xpb = (np.pad(x.data, ((0, 0), (0, 0), (padding, padding),
                                       (padding, padding)))
                       if padding else x.data)
                weight.grad += (g_mat.T @ _im2col(xpb, k, stride, ho, wo)).reshape(
                    weight.data.shape)
            if bias.requires_grad:
                bias.grad += g_mat.sum(axis=0)
            if x.requires_grad:
                if stride == 1 and padding <= k - 1:
                    # full correlation of the output gradient with the
                    # channel-transposed, spatially flipped kernel
                    w_rot = np.ascontiguousarray(
                        weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                    ).reshape(c, o * k * k)
                    pg = k - 1 - padding
                    gp = (np.pad(g, ((0, 0), (0, 0), (pg, pg), (pg, pg)))
                          if pg else g)
                    gcols = _im2col(gp, k, 1, h, w)
                    x.grad += (gcols @ w_rot.T).reshape(b, h, w, c).transpose(0, 3, 1, 2)
                else:
                    gcols = (g_mat @ w_mat).reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
                    gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
                    for ki in range(k):
                        for kj in range(k):
                            gxp[:, :, ki:ki + stride * ho:stride,
                                kj:kj + stride * wo:stride] += gcols[..., ki, kj]
                    if padding:
                        x.grad += gxp[:, :, padding:padding + h, padding:padding + w]
                    else:
                        x.grad += gxp
        out._backward = _bw
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, k, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows.transpose(0, 4, 5, 1, 2, 3)).reshape(
        b * ho * wo, c * k * k)


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    b, c, h, w = x.data.shape
    o = weight.data.shape[0]
    w_mat = weight.data.reshape(o, c)
    out_data = np.matmul(w_mat, x.data.reshape(b, c, h * w)).reshape(b, o, h, w)
    out_data += bias.data[:, None, None]
    out = _node(out_data, x, weight, bias)
    if out._prev:
        def _bw(g):
            g = g.reshape(b, o, h * w)
            if weight.requires_grad:
                xr = x.data.reshape(b, c, h * w)
                weight.grad += np.matmul(g, xr.transpose(0, 2, 1)).sum(axis=0).reshape(
                    o, c, 1, 1)
            if bias.requires_grad:
                bias.grad += g.sum(axis=(0, 2))
            if x.requires_grad:
                x.grad += np.matmul(w_mat.T, g).reshape(b, c, h, w)
        out._backward = _bw
    return out


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * ratio - 0.5
        base = math.floor(src)
        frac = src - base
        lo = min(max(base, 0), n_in - 1)
        hi = min(max(base + 1, 0), n_in - 1)
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    m.setflags(write=False)
    return m


def _separable_map(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    # rows @ x @ cols.T over the trailing two axes
    out_data = np.matmul(np.matmul(rows, x.data), cols.T)
    out = _node(out_data, x)
    if out._prev:
        def _bw(g):
            x.grad += np.matmul(np.matmul(rows.T, g), cols)
        out._backward = _bw
    return out


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a BCHW tensor with half-pixel-center bilinear sampling."""
    _require_bchw(x, "bilinear_upsample")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bilinear_upsample: target size {out_h}x{out_w} must be positive")
    _, _, h, w = x.data.shape
    return _separable_map(x, _interp_matrix(h, out_h), _interp_matrix(w, out_w))


@lru_cache(maxsize=None)
def _pool_matrix(n: int, bins: int) -> np.ndarray:
    """Adaptive-average weights; cell k covers floor(k*n/bins)..ceil((k+1)*n/bins)."""
    m = np.zeros((bins, n))
    for k in range(bins):
        lo = (k * n) // bins
        hi = -(-((k + 1) * n) // bins)  # ceil division
        m[k, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def pyramid_pool(x: Tensor, bins) -> Tensor:
    """Adaptive average pooling of a single-channel map into a bins x bins grid."""
    _require_bchw(x, "pyramid_pool")
    _, c, h, w = x.data.shape
    if c != 1:
        raise DimensionError(f"pyramid_pool: expected a single-channel map, got {c} channels")
    if bins == GLOBAL:
        nb = 1
    else:
        nb = int(bins)
        if nb < 1 or nb > min(h, w):
            raise ConfigError(f"pyramid_pool: bins {nb} outside [1, {min(h, w)}] for {h}x{w} input")
    return _separable_map(x, _pool_matrix(h, nb), _pool_matrix(w, nb))


def concat_channels(inputs) -> Tensor:
    """Stack BCHW tensors along the channel axis, in argument order."""
    inputs = list(inputs)
    if not inputs:
        raise DimensionError("concat_channels: empty input list")
    for t in inputs:
        _require_bchw(t, "concat_channels")
    b, _, h, w = inputs[0].data.shape
    for t in inputs[1:]:
        tb, _, th, tw = t.data.shape
        if (tb, th, tw) != (b, h, w):
            raise DimensionError(
                f"concat_channels: shape {t.data.shape} incompatible with {inputs[0].data.shape}")
    out = _node(np.concatenate([t.data for t in inputs], axis=1), *inputs)
    if out._prev:
        offsets = np.cumsum([0] + [t.data.shape[1] for t in inputs])
        def _bw(g):
            for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t.grad += g[:, lo:hi]
        out._backward = _bw
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of (B, N) rows by an (M, N) weight and (M,) bias."""
    if x.data.ndim != 2:
        raise DimensionError(f"linear: expected (B, N) input, got shape {x.data.shape}")
    if weight.data.ndim != 2:
        raise DimensionError(f"linear: expected (M, N) weight, got shape {weight.data.shape}")
    m, n = weight.data.shape
    if x.data.shape[1] != n:
        raise DimensionError(f"linear: input width {x.data.shape[1]} != weight width {n}")
    if bias.data.shape != (m,):
        raise DimensionError(f"linear: bias shape {bias.data.shape} != ({m},)")
    out = _node(x.data @ weight.data.T + bias.data, x, weight, bias)
    if out._prev:
        def _bw(g):
            if x.requires_grad:
                x.grad += g @ weight.data
            if weight.requires_grad:
                weight.grad += g.T @ x.data
            if bias.requires_grad:
                bias.grad += g.sum(axis=0)
        out._backward = _bw
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""
    _require_bchw(x, "global_avg_pool")
    _, _, h, w = x.data.shape
    out = _node(x.data.mean(axis=(2, 3)), x)
    if out._prev:
        def _bw(g):
            x.grad += g[:, :, None, None] / (h * w)
        out._backward = _bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(
            f"reshape: cannot view {x.data.shape} ({x.data.size} elements) as {shape}")
    out = _node(x.data.reshape(shape), x)
    if out._prev:
        def _bw(g):
            x.grad += g.reshape(x.data.shape)
        out._backward = _bw
    return out
