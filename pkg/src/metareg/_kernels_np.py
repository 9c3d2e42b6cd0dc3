"""Pure-numpy implementations of the hot numerical primitives.

Mirrors the interface of the compiled extension `_ckernels`; whichever is
available is selected by `metareg.backend`. All functions are pure and
unchecked (argument validation lives in `metareg.kernels`).

Shapes follow the channel-first convention: activations are (C, H, W),
convolution kernels are (C_out, C_in, 3, 3), images are (H, W).
"""
import numpy as np

NAME = "numpy"


def conv2d_forward(x, w, b, stride):
    """3x3 convolution with zero padding 1.

    The spatial sum is organized as 9 tap-shifted GEMMs so the work lands
    in BLAS instead of python loops.
    """
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    y = np.empty((c_out, ho, wo), dtype=x.dtype)
    y[:] = b[:, None, None]
    for p in range(3):
        for q in range(3):
            xs = xp[:, p : p + stride * (ho - 1) + 1 : stride,
                    q : q + stride * (wo - 1) + 1 : stride]
            y += np.tensordot(w[:, :, p, q], xs, axes=(1, 0))
    return y


def conv2d_backward(x, w, gy, stride):
    """Gradients of conv2d_forward w.r.t. input, kernel, and bias."""
    c_in, h, wd = x.shape
    c_out, _, _, _ = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for p in range(3):
        for q in range(3):
            sl_y = slice(p, p + stride * (ho - 1) + 1, stride)
            sl_x = slice(q, q + stride * (wo - 1) + 1, stride)
            gw[:, :, p, q] = np.tensordot(gy, xp[:, sl_y, sl_x], axes=([1, 2], [1, 2]))
            gxp[:, sl_y, sl_x] += np.tensordot(w[:, :, p, q], gy, axes=(0, 0))
    gb = gy.sum(axis=(1, 2))
    return np.ascontiguousarray(gxp[:, 1 : h + 1, 1 : wd + 1]), gw, gb


def leaky_forward(x, slope):
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_backward(x, gy, slope):
    return np.where(x > 0, gy, gy * x.dtype.type(slope))


def _sample_setup(m, u, v):
    h, wd = m.shape
    sx = np.arange(wd, dtype=m.dtype)[None, :] + u
    sy = np.arange(h, dtype=m.dtype)[:, None] + v
    sxc = np.clip(sx, 0.0, wd - 1.0)
    syc = np.clip(sy, 0.0, h - 1.0)
    x0 = sxc.astype(np.int64)
    y0 = syc.astype(np.int64)
    x1 = np.minimum(x0 + 1, wd - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sxc - x0
    fy = syc - y0
    return sx, sy, x0, y0, x1, y1, fx, fy


def warp_forward(m, u, v):
    """Backward-warp image m by displacements (u, v), bilinear, border clamp."""
    _, _, x0, y0, x1, y1, fx, fy = _sample_setup(m, u, v)
    m00 = m[y0, x0]
    m01 = m[y0, x1]
    m10 = m[y1, x0]
    m11 = m[y1, x1]
    top = m00 + fx * (m01 - m00)
    bot = m10 + fx * (m11 - m10)
    return top + fy * (bot - top)


def warp_backward(m, u, v, go):
    """Gradient of the warped image w.r.t. the displacement channels.

    Clamped samples get zero gradient; at integer coordinates the slope of
    the cell to the right/below is used (clip-then-floor does exactly that).
    """
    h, wd = m.shape
    sx, sy, x0, y0, x1, y1, fx, fy = _sample_setup(m, u, v)
    m00 = m[y0, x0]
    m01 = m[y0, x1]
    m10 = m[y1, x0]
    m11 = m[y1, x1]
    dx = (m01 - m00) + fy * ((m11 - m10) - (m01 - m00))
    dy = (m10 - m00) + fx * ((m11 - m01) - (m10 - m00))
    gu = go * dx * (sx >= 0.0)
    gv = go * dy * (sy >= 0.0)
    return gu, gv


def box_sum(img, win):
    """Sliding window x window sum with zero padding, window odd.

    Accumulates in float64 regardless of input dtype; integral-image
    cancellation is harmless at these magnitudes.
    """
    r = win // 2
    acc = img.astype(np.float64, copy=False)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r + 1, r)
        c = np.cumsum(np.pad(acc, pad), axis=axis)
        n = img.shape[axis]
        if axis == 0:
            acc = c[win:, :] - c[:n, :]
        else:
            acc = c[:, win:] - c[:, :n]
    return acc.astype(img.dtype, copy=False)
