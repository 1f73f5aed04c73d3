"""Vectorized numpy versions of the compiled kernels in ``_kernels.pyx``.

Every function here has the same signature and semantics as its compiled
twin; results agree to floating-point reassociation error.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _window(stride: int) -> tuple[int, int]:
    # (kernel, pad); unpooled axes use a 1-wide window so stride 1 is the identity
    return (3, 1) if stride > 1 else (1, 0)


def pooled_extent(extent: int, stride: int) -> int:
    k, p = _window(stride)
    return (extent + 2 * p - k) // stride + 1


def gelu_forward(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf)).astype(x.dtype, copy=False)


def _window_sum(x: np.ndarray, axis: int, stride: int) -> np.ndarray:
    k, p = _window(stride)
    if k == 1:
        return x
    n_out = pooled_extent(x.shape[axis], stride)
    pad = [(0, 0)] * x.ndim
    pad[axis] = (p, p)
    xp = np.pad(x, pad)
    out = None
    for offset in range(k):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(offset, offset + stride * (n_out - 1) + 1, stride)
        part = xp[tuple(sl)]
        out = part.copy() if out is None else out + part
    return out


def _window_sum_t(g: np.ndarray, axis: int, stride: int, extent: int) -> np.ndarray:
    """Adjoint of ``_window_sum`` along one axis."""
    k, p = _window(stride)
    if k == 1:
        return g
    n_out = g.shape[axis]
    shape = list(g.shape)
    shape[axis] = extent + 2 * p
    gp = np.zeros(shape, dtype=g.dtype)
    for offset in range(k):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(offset, offset + stride * (n_out - 1) + 1, stride)
        gp[tuple(sl)] += g
    sl = [slice(None)] * g.ndim
    sl[axis] = slice(p, p + extent)
    return gp[tuple(sl)]


def _counts(F: int, T: int, sf: int, st: int, dtype) -> np.ndarray:
    cf = _window_sum(np.ones(F, dtype=dtype), 0, sf)
    ct = _window_sum(np.ones(T, dtype=dtype), 0, st)
    return np.outer(cf, ct)[None, :, :, None]


def pool_forward(x: np.ndarray, sf: int, st: int) -> np.ndarray:
    _, F, T, _ = x.shape
    s = _window_sum(_window_sum(x, 1, sf), 2, st)
    return s / _counts(F, T, sf, st, x.dtype)


def pool_backward(g: np.ndarray, F: int, T: int, sf: int, st: int) -> np.ndarray:
    g = g / _counts(F, T, sf, st, g.dtype)
    return np.ascontiguousarray(_window_sum_t(_window_sum_t(g, 2, st, T), 1, sf, F))


def im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int) -> np.ndarray:
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho * Wo, C * kh * kw)


def col2im(cols: np.ndarray, shape, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int) -> np.ndarray:
    B, C, H, W = shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    c = cols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += c[:, :, i, j]
    return np.ascontiguousarray(gp[:, :, ph:ph + H, pw:pw + W])


def scatter_rows_add(idx: np.ndarray, src: np.ndarray, n_rows: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    src = np.asarray(src).reshape(idx.shape[0], -1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError("scatter index out of range")
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out
