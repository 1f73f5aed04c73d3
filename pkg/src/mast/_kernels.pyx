# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror ``mast._kernels_py`` exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


cdef inline int _window(int stride) noexcept nogil:
    return 3 if stride > 1 else 1


cdef inline int _pad(int stride) noexcept nogil:
    return 1 if stride > 1 else 0


def pooled_extent(int extent, int stride):
    k = _window(stride)
    p = _pad(stride)
    return (extent + 2 * p - k) // stride + 1


cdef void _gelu_fwd(real[::1] x, real[::1] y) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v
    for i in range(x.shape[0]):
        v = x[i]
        y[i] = <real>(0.5 * v * (1.0 + erf(v * INV_SQRT2)))


cdef void _gelu_bwd(real[::1] x, real[::1] g, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v, cdf, pdf
    for i in range(x.shape[0]):
        v = x[i]
        cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
        pdf = INV_SQRT2PI * exp(-0.5 * v * v)
        out[i] = <real>(g[i] * (cdf + v * pdf))


def gelu_forward(x):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_fwd[float](x.reshape(-1), y.reshape(-1))
    else:
        _gelu_fwd[double](x.reshape(-1), y.reshape(-1))
    return y


def gelu_backward(x, g):
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_bwd[float](x.reshape(-1), g.reshape(-1), out.reshape(-1))
    else:
        _gelu_bwd[double](x.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


cdef void _pool_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                    int sf, int st) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], F = x.shape[1], T = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Fo = out.shape[1], To = out.shape[2]
    cdef int kf = _window(sf), kt = _window(st), pf = _pad(sf), pt = _pad(st)
    cdef Py_ssize_t b, fo, to, f, t, c
    cdef int df, dt, count
    cdef real inv
    for b in range(B):
        for fo in range(Fo):
            for to in range(To):
                count = 0
                for df in range(kf):
                    f = fo * sf - pf + df
                    if f < 0 or f >= F:
                        continue
                    for dt in range(kt):
                        t = to * st - pt + dt
                        if t < 0 or t >= T:
                            continue
                        count += 1
                        for c in range(C):
                            out[b, fo, to, c] += x[b, f, t, c]
                inv = <real>(1.0 / count)
                for c in range(C):
                    out[b, fo, to, c] *= inv


cdef void _pool_bwd(real[:, :, :, ::1] g, real[:, :, :, ::1] gx,
                    int sf, int st) noexcept nogil:
    cdef Py_ssize_t B = gx.shape[0], F = gx.shape[1], T = gx.shape[2], C = gx.shape[3]
    cdef Py_ssize_t Fo = g.shape[1], To = g.shape[2]
    cdef int kf = _window(sf), kt = _window(st), pf = _pad(sf), pt = _pad(st)
    cdef Py_ssize_t b, fo, to, f, t, c
    cdef int df, dt, count
    cdef real inv
    for b in range(B):
        for fo in range(Fo):
            for to in range(To):
                count = 0
                for df in range(kf):
                    f = fo * sf - pf + df
                    if f < 0 or f >= F:
                        continue
                    for dt in range(kt):
                        t = to * st - pt + dt
                        if 0 <= t < T:
                            count += 1
                inv = <real>(1.0 / count)
                for df in range(kf):
                    f = fo * sf - pf + df
                    if f < 0 or f >= F:
                        continue
                    for dt in range(kt):
                        t = to * st - pt + dt
                        if t < 0 or t >= T:
                            continue
                        for c in range(C):
                            gx[b, f, t, c] += g[b, fo, to, c] * inv


def pool_forward(x, int sf, int st):
    x = np.ascontiguousarray(x)
    B, F, T, C = x.shape
    out = np.zeros((B, pooled_extent(F, sf), pooled_extent(T, st), C), dtype=x.dtype)
    if x.dtype == np.float32:
        _pool_fwd[float](x, out, sf, st)
    else:
        _pool_fwd[double](x, out, sf, st)
    return out


def pool_backward(g, int F, int T, int sf, int st):
    g = np.ascontiguousarray(g)
    B, _, _, C = g.shape
    gx = np.zeros((B, F, T, C), dtype=g.dtype)
    if g.dtype == np.float32:
        _pool_bwd[float](g, gx, sf, st)
    else:
        _pool_bwd[double](g, gx, sf, st)
    return gx


cdef void _im2col(real[:, :, :, ::1] x, real[:, :, ::1] cols,
                  int kh, int kw, int sh, int sw, int ph, int pw,
                  Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, i, j, oh, ow, h, w, col, row
    for b in range(B):
        for oh in range(Ho):
            for ow in range(Wo):
                row = oh * Wo + ow
                col = 0
                for c in range(C):
                    for i in range(kh):
                        h = oh * sh - ph + i
                        for j in range(kw):
                            w = ow * sw - pw + j
                            if 0 <= h < H and 0 <= w < W:
                                cols[b, row, col] = x[b, c, h, w]
                            col += 1


cdef void _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] gx,
                  int kh, int kw, int sh, int sw, int ph, int pw,
                  Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t B = gx.shape[0], C = gx.shape[1], H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t b, c, i, j, oh, ow, h, w, col, row
    for b in range(B):
        for oh in range(Ho):
            for ow in range(Wo):
                row = oh * Wo + ow
                col = 0
                for c in range(C):
                    for i in range(kh):
                        h = oh * sh - ph + i
                        for j in range(kw):
                            w = ow * sw - pw + j
                            if 0 <= h < H and 0 <= w < W:
                                gx[b, c, h, w] += cols[b, row, col]
                            col += 1


def im2col(x, int kh, int kw, int sh, int sw, int ph, int pw):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    cols = np.zeros((B, Ho * Wo, C * kh * kw), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, sh, sw, ph, pw, Ho, Wo)
    else:
        _im2col[double](x, cols, kh, kw, sh, sw, ph, pw, Ho, Wo)
    return cols


def col2im(cols, shape, int kh, int kw, int sh, int sw, int ph, int pw):
    cols = np.ascontiguousarray(cols)
    B, C, H, W = shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    gx = np.zeros((B, C, H, W), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, gx, kh, kw, sh, sw, ph, pw, Ho, Wo)
    else:
        _col2im[double](cols, gx, kh, kw, sh, sw, ph, pw, Ho, Wo)
    return gx


cdef void _scatter_rows(const cnp.int64_t[::1] idx, real[:, ::1] src,
                        real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = idx.shape[0], D = src.shape[1]
    cdef Py_ssize_t i, d, r
    for i in range(n):
        r = idx[i]
        for d in range(D):
            out[r, d] += src[i, d]


def scatter_rows_add(idx, src, Py_ssize_t n_rows):
    idx = np.ascontiguousarray(idx, dtype=np.int64).reshape(-1)
    src = np.ascontiguousarray(src).reshape(idx.shape[0], -1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError("scatter index out of range")
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    if src.dtype == np.float32:
        _scatter_rows[float](idx, src, out)
    else:
        _scatter_rows[double](idx, src, out)
    return out
