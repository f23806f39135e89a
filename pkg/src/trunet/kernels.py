"""Volumetric kernels: convolution, pooling, resampling and normalization.

All tensors use the NCDHW layout. Forward passes are vectorised numpy
(im2col + one GEMM for convolutions); each kernel carries a hand-written
backward rule that is verified against finite differences in the tests.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError
from .tensor import Tensor, make_result

NORM_EPS = 1e-5


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad3(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    pw = ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding))
    return np.pad(x, pw, mode="constant", constant_values=value)


def _windows(xp: np.ndarray, k: int, stride: int, out: tuple) -> np.ndarray:
    """View of shape (N, C, Do, Ho, Wo, k, k, k) over a padded input."""
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    if stride != 1:
        win = win[:, :, ::stride, ::stride, ::stride]
    return win[:, :, : out[0], : out[1], : out[2]]


def _scatter_windows(dwin: np.ndarray, padded_shape: tuple, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`; ``dwin`` is (N, C, Do, Ho, Wo, k, k, k)."""
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    do, ho, wo = dwin.shape[2:5]
    for a in range(k):
        for b in range(k):
            for c in range(k):
                dxp[:, :,
                    a: a + stride * (do - 1) + 1: stride,
                    b: b + stride * (ho - 1) + 1: stride,
                    c: c + stride * (wo - 1) + 1: stride] += dwin[..., a, b, c]
    return dxp


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation, ``x`` [N,Cin,D,H,W] with ``weight`` [Cout,Cin,k,k,k]."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ConfigurationError(f"conv3d expects 5-D input and kernel, got {x.shape}, {weight.shape}")
    n, cin, d, h, w = x.shape
    cout, cin_w, k = weight.shape[:3]
    if cin != cin_w:
        raise ConfigurationError(f"conv3d: input has {cin} channels, kernel expects {cin_w}")
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ConfigurationError(f"conv3d needs an odd cubic kernel, got {weight.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv3d: stride must be >= 1 and padding >= 0")
    out = tuple(conv_output_extent(s, k, stride, padding) for s in (d, h, w))
    if min(out) < 1:
        raise ConfigurationError(f"conv3d output extent {out} is empty for input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv3d bias shape {bias.shape} != ({cout},)")

    xd, wd = x.data, weight.data
    nv = n * out[0] * out[1] * out[2]
    wmat = wd.reshape(cout, -1)
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.transpose(1, 0, 2, 3, 4).reshape(cin, nv)
        padded_shape = xd.shape
    else:
        xp = _pad3(xd, padding)
        padded_shape = xp.shape
        win = _windows(xp, k, stride, out)
        # rows ordered (cin, kd, kh, kw) to match the kernel layout
        cols = np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4)).reshape(cin * k ** 3, nv)
    res = wmat @ cols
    if bias is not None:
        res += bias.data[:, None]
    res = res.reshape(cout, n, *out)
    y = res[:, 0][None] if n == 1 else np.ascontiguousarray(res.transpose(1, 0, 2, 3, 4))

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(cout, nv)
        gw = (g2 @ cols.T).reshape(wd.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = wmat.T @ g2
            if pointwise:
                gx = dcols.reshape(cin, n, d, h, w).transpose(1, 0, 2, 3, 4)
            else:
                dwin = dcols.reshape(cin, k, k, k, n, *out).transpose(4, 0, 5, 6, 7, 1, 2, 3)
                dxp = _scatter_windows(dwin, padded_shape, k, stride)
                p = padding
                gx = dxp[:, :, p: p + d, p: p + h, p: p + w] if p else dxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, (lambda g: bw(g)[:2]) if bias is None else bw)


def maxpool3d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling over cubic windows; padded cells never win."""
    stride = kernel if stride is None else stride
    n, c, d, h, w = x.shape
    out = tuple(conv_output_extent(s, kernel, stride, padding) for s in (d, h, w))
    if min(out) < 1:
        raise ConfigurationError(f"maxpool3d output extent {out} is empty for input {x.shape}")
    xp = _pad3(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, stride, out).reshape(n, c, *out, kernel ** 3)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros(g.shape + (kernel ** 3,), dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        dwin = onehot.reshape(g.shape + (kernel, kernel, kernel))
        dxp = _scatter_windows(dwin, xp.shape, kernel, stride)
        p = padding
        return (dxp[:, :, p: p + d, p: p + h, p: p + w] if p else dxp,)

    return make_result(np.ascontiguousarray(y), (x,), bw)


# -- linear resampling ----------------------------------------------------

@lru_cache(maxsize=256)
def _interp_matrix_cached(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (align-corners=False, edge-clamped)."""
    return _interp_matrix_cached(int(n_in), int(n_out)).astype(dtype)


def _apply_axis(a: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(a, axis, -1)
    return np.moveaxis(moved @ m.T, -1, axis)


def resize_linear(a: np.ndarray, out_shape: tuple) -> np.ndarray:
    """Separable (tri)linear resize of the trailing ``len(out_shape)`` axes."""
    offset = a.ndim - len(out_shape)
    res = a
    for i, n_out in enumerate(out_shape):
        axis = offset + i
        if res.shape[axis] != n_out:
            res = _apply_axis(res, interp_matrix(res.shape[axis], n_out, a.dtype), axis)
    return np.ascontiguousarray(res)


def resize_nearest(a: np.ndarray, out_shape: tuple) -> np.ndarray:
    """Nearest-neighbour resize of the trailing axes (label-safe)."""
    offset = a.ndim - len(out_shape)
    res = a
    for i, n_out in enumerate(out_shape):
        axis = offset + i
        n_in = res.shape[axis]
        if n_in != n_out:
            src = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
            res = np.take(res, np.minimum(src, n_in - 1), axis=axis)
    return res


def trilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Trilinear upsampling by an integer factor (align-corners=False)."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    return resize_trilinear(x, tuple(s * factor for s in x.shape[2:]))


def resize_trilinear(x: Tensor, size: tuple) -> Tensor:
    """Differentiable trilinear resize of the spatial axes to ``size``."""
    spatial = x.shape[2:]
    mats = [interp_matrix(a, b, x.dtype) for a, b in zip(spatial, size)]
    y = x.data
    for i, m in enumerate(mats):
        if spatial[i] != size[i]:
            y = _apply_axis(y, m, 2 + i)

    def bw(g):
        for i, m in enumerate(mats):
            if spatial[i] != size[i]:
                g = _apply_axis(g, m.T, 2 + i)
        return (np.ascontiguousarray(g),)

    return make_result(np.ascontiguousarray(y), (x,), bw)


# -- normalization --------------------------------------------------------

def default_groups(channels: int, max_groups: int = 32) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups``."""
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


def _normalize_rows(xr: np.ndarray, eps: float):
    mu = xr.mean(axis=-1, keepdims=True)
    centered = xr - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return centered * inv, inv


def _normalize_rows_backward(gxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (gxhat - m1 - xhat * m2)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-group standardisation followed by a per-channel affine."""
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"group_norm affine parameters must have shape ({c},)")
    shape = x.shape
    xhat, inv = _normalize_rows(x.data.reshape(n, groups, -1), eps)
    xhat_full = xhat.reshape(shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    y = xhat_full * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
            gx = _normalize_rows_backward(gxhat, xhat, inv).reshape(shape)
        gg = (g * xhat_full).sum(axis=reduce_axes) if gamma.requires_grad else None
        gb = g.sum(axis=reduce_axes) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(y, (x, gamma, beta), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    e = x.shape[-1]
    if gamma.shape != (e,) or beta.shape != (e,):
        raise ConfigurationError(f"layer_norm affine parameters must have shape ({e},)")
    xhat, inv = _normalize_rows(x.data, eps)
    y = xhat * gamma.data + beta.data
    reduce_axes = tuple(range(x.ndim - 1))

    def bw(g):
        gx = _normalize_rows_backward(g * gamma.data, xhat, inv) if x.requires_grad else None
        gg = (g * xhat).sum(axis=reduce_axes) if gamma.requires_grad else None
        gb = g.sum(axis=reduce_axes) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(y, (x, gamma, beta), bw)
