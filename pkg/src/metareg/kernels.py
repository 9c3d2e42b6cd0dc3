"""Differentiable 2D primitives with hand-written analytic gradients.

Every op is a pure function; the matching *_backward function implements
its exact gradient contract. Activations are channel-first (C, H, W)
float arrays, images and displacement channels are (H, W).

The heavy inner loops (convolution, warping, window sums) are dispatched
through `metareg.backend`; the cheap ops live here directly.
"""
import numpy as np

from . import backend
from .errors import NumericError, ConfigError, ShapeError


def _require_finite(name, arr):
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite values")


def _as_c(arr):
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def conv2d(x, w, b, stride=1):
    """3x3 same-convolution, zero padding 1, stride 1 or 2.

    y[o,i,j] = b[o] + sum_{c,p,q} w[o,c,p,q] * x_pad[c, i*stride+p, j*stride+q]
    """
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"expected x (C,H,W) and w (Co,Ci,3,3), got {x.shape} / {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel expects {w.shape[1]} input channels, x has {x.shape[0]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    return backend.active().conv2d_forward(x, w, b, stride)


def conv2d_backward(x, w, gy, stride=1):
    """Returns (dL/dx, dL/dw, dL/db) given upstream dL/dy."""
    ho = (x.shape[1] - 1) // stride + 1
    wo = (x.shape[2] - 1) // stride + 1
    if gy.shape != (w.shape[0], ho, wo):
        raise ShapeError(f"upstream gradient shape {gy.shape} != {(w.shape[0], ho, wo)}")
    return backend.active().conv2d_backward(x, w, gy, stride)


def leaky_relu(x, slope):
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky slope must be in (0,1), got {slope}")
    _require_finite("leaky_relu input", x)
    if x.ndim == 3 and x.flags.c_contiguous:
        return backend.active().leaky_forward(x, slope)
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(x, gy, slope):
    # derivative at exactly 0 is defined as slope
    if x.ndim == 3 and x.flags.c_contiguous and gy.flags.c_contiguous:
        return backend.active().leaky_backward(x, gy, slope)
    return np.where(x > 0, gy, gy * x.dtype.type(slope))


def upsample2x(x):
    """Nearest-neighbor 2x upsampling of (C, H, W)."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2x_backward(gy):
    c, h2, w2 = gy.shape
    return gy.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))


def concat_channels(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"spatial dims differ: {a.shape[1:]} vs {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)


def split_channels(g, c_first):
    """Backward of concat_channels: split upstream gradient at channel c_first."""
    return g[:c_first], g[c_first:]


def warp_bilinear(m, field):
    """Deform image m by a displacement field.

    Output pixel (y, x) bilinearly samples m at (x + field[0,y,x],
    y + field[1,y,x]); sample coordinates are clamped to the image
    rectangle, so output values stay within [min(m), max(m)].
    """
    _check_field(m, field)
    m, field = _as_c(m), _as_c(field)
    return backend.active().warp_forward(m, field[0], field[1])


def warp_bilinear_backward(m, field, go):
    """dL/dfield given upstream dL/d(warped image); m is treated as a leaf."""
    _check_field(m, field)
    if go.shape != m.shape:
        raise ShapeError(f"upstream gradient shape {go.shape} != image shape {m.shape}")
    m, field, go = _as_c(m), _as_c(field), _as_c(go)
    gu, gv = backend.active().warp_backward(m, field[0], field[1], go)
    return np.stack([gu, gv])


def box_sum(img, win):
    """win x win sliding sum with zero padding; win odd and >= 3."""
    if win < 3 or win % 2 == 0:
        raise ConfigError(f"window must be odd and >= 3, got {win}")
    return backend.active().box_sum(img, win)


def _check_field(m, field):
    if m.ndim != 2:
        raise ShapeError(f"image must be (H,W), got {m.shape}")
    if field.shape != (2,) + m.shape:
        raise ShapeError(f"field shape {field.shape} != {(2,) + m.shape}")
