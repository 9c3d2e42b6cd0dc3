# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core: 3x3 convolution, leaky activation, bilinear
warping, and zero-padded window sums.

Interface mirrors `metareg._kernels_np`; `metareg.backend` picks one at
import. Kernels are specialized for float32 and float64 via fused types.

Stride-1 convolutions run as 9 tap-shifted GEMMs over zero-padded frames
(flattened spatial index, leading dimension = padded frame size), which
avoids materializing im2col matrices; the junk the taps compute inside
the one-pixel halo never leaves it. Stride-2 convolutions use a plain
im2col + GEMM, where the matrices are four times smaller.
"""
import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm

NAME = "cython"

ctypedef fused real:
    float
    double


cdef inline void _gemm(char *ta, char *tb, int m, int n, int k,
                       real *a, int lda, real *b, int ldb,
                       real beta, real *c, int ldc) noexcept nogil:
    cdef real one = 1.0
    if real is double:
        dgemm(ta, tb, &m, &n, &k, <double *> &one, <double *> a, &lda,
              <double *> b, &ldb, <double *> &beta, <double *> c, &ldc)
    else:
        sgemm(ta, tb, &m, &n, &k, <float *> &one, <float *> a, &lda,
              <float *> b, &ldb, <float *> &beta, <float *> c, &ldc)


cdef inline void _pad_into(real[:, :, ::1] src, real *dst, int frame_w) noexcept nogil:
    # dst is a zeroed (C, frame_h, frame_w) buffer; copy src into the interior
    cdef int c, y, x
    cdef int ci = src.shape[0], h = src.shape[1], w = src.shape[2]
    cdef real *row
    for c in range(ci):
        for y in range(h):
            row = dst + (c * (h + 2) + (y + 1)) * frame_w + 1
            for x in range(w):
                row[x] = src[c, y, x]


def conv2d_forward(real[:, :, ::1] x, real[:, :, :, ::1] w, real[::1] b, int stride):
    if stride == 1:
        return _conv_s1_forward(x, w, b)
    return _conv_im2col_forward(x, w, b, stride)


def conv2d_backward(real[:, :, ::1] x, real[:, :, :, ::1] w,
                    real[:, :, ::1] gy, int stride):
    if stride == 1:
        return _conv_s1_backward(x, w, gy)
    return _conv_im2col_backward(x, w, gy, stride)


# ------------------------------------------------------- stride-1 path

cdef _conv_s1_forward(real[:, :, ::1] x, real[:, :, :, ::1] w, real[::1] b):
    cdef int ci = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int co = w.shape[0]
    cdef int fw = wd + 2, frame = (h + 2) * fw
    cdef int t0 = fw + 1
    cdef int span = (h - 1) * fw + wd
    dtype = np.float64 if real is double else np.float32
    xp_arr = np.zeros(ci * frame, dtype=dtype)
    yp_arr = np.empty(co * frame, dtype=dtype)
    wt_arr = np.empty((9, co, ci), dtype=dtype)
    y_arr = np.empty((co, h, wd), dtype=dtype)
    cdef real[::1] xp = xp_arr
    cdef real[::1] yp = yp_arr
    cdef real[:, :, ::1] wt = wt_arr
    cdef real[:, :, ::1] y = y_arr
    cdef int p, q, o, c, i, j, tap, off
    cdef real beta, bias
    with nogil:
        _pad_into(x, &xp[0], fw)
        for o in range(co):
            for c in range(ci):
                for tap in range(9):
                    wt[tap, o, c] = w[o, c, tap // 3, tap % 3]
        beta = 0.0
        for tap in range(9):
            p = tap // 3
            q = tap % 3
            off = (p - 1) * fw + (q - 1)
            # Y(co,span) += Wtap(co,ci) @ X(ci,span); rows strided by frame
            _gemm("N", "N", span, co, ci, &xp[t0 + off], frame,
                  &wt[tap, 0, 0], ci, beta, &yp[t0], frame)
            beta = 1.0
        for o in range(co):
            bias = b[o]
            for i in range(h):
                for j in range(wd):
                    y[o, i, j] = yp[o * frame + (i + 1) * fw + (j + 1)] + bias
    return y_arr


cdef _conv_s1_backward(real[:, :, ::1] x, real[:, :, :, ::1] w, real[:, :, ::1] gy):
    cdef int ci = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int co = w.shape[0]
    cdef int fw = wd + 2, frame = (h + 2) * fw
    cdef int t0 = fw + 1
    cdef int span = (h - 1) * fw + wd
    dtype = np.float64 if real is double else np.float32
    xp_arr = np.zeros(ci * frame, dtype=dtype)
    gyp_arr = np.zeros(co * frame, dtype=dtype)
    gxp_arr = np.zeros(ci * frame, dtype=dtype)
    wt_arr = np.empty((9, co, ci), dtype=dtype)
    gwt_arr = np.empty((9, co, ci), dtype=dtype)
    gx_arr = np.empty((ci, h, wd), dtype=dtype)
    gw_arr = np.empty((co, ci, 3, 3), dtype=dtype)
    gb_arr = np.empty(co, dtype=dtype)
    cdef real[::1] xp = xp_arr
    cdef real[::1] gyp = gyp_arr
    cdef real[::1] gxp = gxp_arr
    cdef real[:, :, ::1] wt = wt_arr
    cdef real[:, :, ::1] gwt = gwt_arr
    cdef real[:, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[::1] gb = gb_arr
    cdef int p, q, o, c, i, j, tap, off
    cdef double acc
    with nogil:
        _pad_into(x, &xp[0], fw)
        _pad_into(gy, &gyp[0], fw)
        for o in range(co):
            for c in range(ci):
                for tap in range(9):
                    wt[tap, o, c] = w[o, c, tap // 3, tap % 3]
        for tap in range(9):
            p = tap // 3
            q = tap % 3
            off = (p - 1) * fw + (q - 1)
            # gX(ci,span)[shifted] += Wtap^T(ci,co) @ gY(co,span)
            _gemm("N", "T", span, ci, co, &gyp[t0], frame,
                  &wt[tap, 0, 0], ci, <real> 1.0, &gxp[t0 + off], frame)
            # gWtap(co,ci) = gY(co,span) @ X(ci,span)[shifted]^T
            _gemm("T", "N", ci, co, span, &xp[t0 + off], frame,
                  &gyp[t0], frame, <real> 0.0, &gwt[tap, 0, 0], ci)
        for o in range(co):
            for c in range(ci):
                for tap in range(9):
                    gw[o, c, tap // 3, tap % 3] = gwt[tap, o, c]
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    gx[c, i, j] = gxp[c * frame + (i + 1) * fw + (j + 1)]
        for o in range(co):
            acc = 0.0
            for i in range(h):
                for j in range(wd):
                    acc += gy[o, i, j]
            gb[o] = <real> acc
    return gx_arr, gw_arr, gb_arr


# ------------------------------------------------------- stride-2 path

cdef void _im2col(real[:, :, ::1] x, real[:, ::1] cols, int stride,
                  int ho, int wo) noexcept nogil:
    # cols[(c*9 + p*3 + q), i*wo + j] = x_pad[c, i*stride+p, j*stride+q]
    cdef int ci = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int c, p, q, i, j, yy, xx, row
    for c in range(ci):
        for p in range(3):
            for q in range(3):
                row = c * 9 + p * 3 + q
                for i in range(ho):
                    yy = i * stride + p - 1
                    if yy < 0 or yy >= h:
                        for j in range(wo):
                            cols[row, i * wo + j] = 0.0
                        continue
                    for j in range(wo):
                        xx = j * stride + q - 1
                        if 0 <= xx < w:
                            cols[row, i * wo + j] = x[c, yy, xx]
                        else:
                            cols[row, i * wo + j] = 0.0


cdef _conv_im2col_forward(real[:, :, ::1] x, real[:, :, :, ::1] w,
                          real[::1] b, int stride):
    cdef int ci = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int co = w.shape[0]
    cdef int ho = (h - 1) // stride + 1
    cdef int wo = (wd - 1) // stride + 1
    cdef int k = ci * 9, n = ho * wo
    dtype = np.float64 if real is double else np.float32
    cols_arr = np.empty((k, n), dtype=dtype)
    y_arr = np.empty((co, n), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef real[:, ::1] y = y_arr
    cdef int o, t
    with nogil:
        _im2col(x, cols, stride, ho, wo)
        # y(co,n) = Wmat(co,k) @ cols(k,n)
        _gemm("N", "N", n, co, k, &cols[0, 0], n, &w[0, 0, 0, 0], k,
              <real> 0.0, &y[0, 0], n)
        for o in range(co):
            for t in range(n):
                y[o, t] += b[o]
    return y_arr.reshape(co, ho, wo)


cdef _conv_im2col_backward(real[:, :, ::1] x, real[:, :, :, ::1] w,
                           real[:, :, ::1] gy, int stride):
    cdef int ci = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int co = w.shape[0]
    cdef int ho = gy.shape[1], wo = gy.shape[2]
    cdef int k = ci * 9, n = ho * wo
    dtype = np.float64 if real is double else np.float32
    cols_arr = np.empty((k, n), dtype=dtype)
    gcols_arr = np.empty((k, n), dtype=dtype)
    gx_arr = np.zeros((ci, h, wd), dtype=dtype)
    gw_arr = np.empty((co, ci, 3, 3), dtype=dtype)
    gb_arr = np.empty(co, dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef real[:, ::1] gcols = gcols_arr
    cdef real[:, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[::1] gb = gb_arr
    cdef int o, c, p, q, i, j, yy, xx, row
    cdef double acc
    with nogil:
        _im2col(x, cols, stride, ho, wo)
        # gw(co,k) = gy(co,n) @ cols(k,n)^T
        _gemm("T", "N", k, co, n, &cols[0, 0], n, &gy[0, 0, 0], n,
              <real> 0.0, &gw[0, 0, 0, 0], k)
        # gcols(k,n) = Wmat(co,k)^T @ gy(co,n)
        _gemm("N", "T", n, k, co, &gy[0, 0, 0], n, &w[0, 0, 0, 0], k,
              <real> 0.0, &gcols[0, 0], n)
        for o in range(co):
            acc = 0.0
            for i in range(ho):
                for j in range(wo):
                    acc += gy[o, i, j]
            gb[o] = <real> acc
        for c in range(ci):
            for p in range(3):
                for q in range(3):
                    row = c * 9 + p * 3 + q
                    for i in range(ho):
                        yy = i * stride + p - 1
                        if yy < 0 or yy >= h:
                            continue
                        for j in range(wo):
                            xx = j * stride + q - 1
                            if 0 <= xx < wd:
                                gx[c, yy, xx] += gcols[row, i * wo + j]
    return gx_arr, gw_arr, gb_arr


# ------------------------------------------------------- activations

def leaky_forward(real[:, :, ::1] x, double slope):
    cdef int c = x.shape[0], h = x.shape[1], w = x.shape[2]
    dtype = np.float64 if real is double else np.float32
    out_arr = np.empty((c, h, w), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef real s = <real> slope, val
    cdef int i, j, o
    with nogil:
        for o in range(c):
            for i in range(h):
                for j in range(w):
                    val = x[o, i, j]
                    out[o, i, j] = val if val > 0.0 else s * val
    return out_arr


def leaky_backward(real[:, :, ::1] x, real[:, :, ::1] gy, double slope):
    cdef int c = x.shape[0], h = x.shape[1], w = x.shape[2]
    dtype = np.float64 if real is double else np.float32
    out_arr = np.empty((c, h, w), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef real s = <real> slope
    cdef int i, j, o
    with nogil:
        for o in range(c):
            for i in range(h):
                for j in range(w):
                    out[o, i, j] = gy[o, i, j] if x[o, i, j] > 0.0 else s * gy[o, i, j]
    return out_arr


# ------------------------------------------------------- warping

def warp_forward(real[:, ::1] m, real[:, ::1] u, real[:, ::1] v):
    cdef int h = m.shape[0], w = m.shape[1]
    dtype = np.float64 if real is double else np.float32
    out_arr = np.empty((h, w), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef int y, x, x0, y0, x1, y1
    cdef real sx, sy, fx, fy, top, bot
    with nogil:
        for y in range(h):
            for x in range(w):
                sx = x + u[y, x]
                sy = y + v[y, x]
                if sx < 0.0:
                    sx = 0.0
                elif sx > w - 1:
                    sx = w - 1
                if sy < 0.0:
                    sy = 0.0
                elif sy > h - 1:
                    sy = h - 1
                x0 = <int> sx
                y0 = <int> sy
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                fx = sx - x0
                fy = sy - y0
                top = m[y0, x0] + fx * (m[y0, x1] - m[y0, x0])
                bot = m[y1, x0] + fx * (m[y1, x1] - m[y1, x0])
                out[y, x] = top + fy * (bot - top)
    return out_arr


def warp_backward(real[:, ::1] m, real[:, ::1] u, real[:, ::1] v,
                  real[:, ::1] go):
    cdef int h = m.shape[0], w = m.shape[1]
    dtype = np.float64 if real is double else np.float32
    gu_arr = np.empty((h, w), dtype=dtype)
    gv_arr = np.empty((h, w), dtype=dtype)
    cdef real[:, ::1] gu = gu_arr
    cdef real[:, ::1] gv = gv_arr
    cdef int y, x, x0, y0, x1, y1
    cdef real sx, sy, sxc, syc, fx, fy, m00, m01, m10, m11, dx, dy
    with nogil:
        for y in range(h):
            for x in range(w):
                sx = x + u[y, x]
                sy = y + v[y, x]
                sxc = sx
                syc = sy
                if sxc < 0.0:
                    sxc = 0.0
                elif sxc > w - 1:
                    sxc = w - 1
                if syc < 0.0:
                    syc = 0.0
                elif syc > h - 1:
                    syc = h - 1
                x0 = <int> sxc
                y0 = <int> syc
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                fx = sxc - x0
                fy = syc - y0
                m00 = m[y0, x0]
                m01 = m[y0, x1]
                m10 = m[y1, x0]
                m11 = m[y1, x1]
                dx = (m01 - m00) + fy * ((m11 - m10) - (m01 - m00))
                dy = (m10 - m00) + fx * ((m11 - m01) - (m10 - m00))
                gu[y, x] = go[y, x] * dx if sx >= 0.0 else 0.0
                gv[y, x] = go[y, x] * dy if sy >= 0.0 else 0.0
    return gu_arr, gv_arr


# ------------------------------------------------------- window sums

def box_sum(real[:, ::1] img, int win):
    """win x win sliding sum, zero padded; accumulates in double."""
    cdef int h = img.shape[0], w = img.shape[1]
    cdef int r = win // 2
    dtype = np.float64 if real is double else np.float32
    out_arr = np.empty((h, w), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    tmp_arr = np.empty((h, w), dtype=np.float64)
    colacc_arr = np.empty(w, dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[::1] colacc = colacc_arr
    cdef int y, x, t
    cdef double acc
    with nogil:
        for y in range(h):
            acc = 0.0
            for t in range(r + 1 if r + 1 < w else w):
                acc += img[y, t]
            tmp[y, 0] = acc
            for x in range(1, w):
                if x + r < w:
                    acc += img[y, x + r]
                if x - r - 1 >= 0:
                    acc -= img[y, x - r - 1]
                tmp[y, x] = acc
        for x in range(w):
            acc = 0.0
            for t in range(r + 1 if r + 1 < h else h):
                acc += tmp[t, x]
            colacc[x] = acc
            out[0, x] = <real> colacc[x]
        for y in range(1, h):
            for x in range(w):
                if y + r < h:
                    colacc[x] += tmp[y + r, x]
                if y - r - 1 >= 0:
                    colacc[x] -= tmp[y - r - 1, x]
                out[y, x] = <real> colacc[x]
    return out_arr
