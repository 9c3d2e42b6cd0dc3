"""Unsupervised registration objective: negative windowed cross-correlation
similarity plus a displacement-gradient smoothness penalty.

Both terms are means over pixels, so the smoothness weight keeps the same
meaning across image sizes. All gradients are analytic.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .kernels import box_sum, warp_bilinear, warp_bilinear_backward


@dataclass(frozen=True)
class LossConfig:
    window: int = 9
    smooth_weight: float = 1.0  # "lambda" in config files
    eps: float = 1e-5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and >= 3, got {self.window}")
        if self.smooth_weight < 0:
            raise ConfigError(f"smooth_weight must be >= 0, got {self.smooth_weight}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")


def local_cc(fixed, warped, cfg=LossConfig()):
    """Mean over pixels of the squared windowed correlation, in [0, 1].

    Per pixel, statistics are taken over the window x window neighborhood
    with out-of-image intensities treated as zero (so the element count is
    window**2 everywhere):

        cc_p = cross_p**2 / (var_fixed_p * var_warped_p + eps)

    with cross/var the centered window sums. Returns (value, d value /
    d warped); the fixed image is a leaf.
    """
    if fixed.shape != warped.shape:
        raise ShapeError(f"image shapes differ: {fixed.shape} vs {warped.shape}")
    k = cfg.window
    n = float(k * k)
    npx = fixed.size

    s_f = box_sum(fixed, k)
    s_w = box_sum(warped, k)
    s_ff = box_sum(fixed * fixed, k)
    s_ww = box_sum(warped * warped, k)
    s_fw = box_sum(fixed * warped, k)

    cross = s_fw - s_f * s_w / n
    var_f = s_ff - s_f * s_f / n
    var_w = s_ww - s_w * s_w / n
    denom = var_f * var_w + cfg.eps

    cc_map = cross * cross / denom
    cc = float(cc_map.mean())

    alpha = 2.0 * cross / denom
    beta = 2.0 * cross * cross * var_f / (denom * denom)
    grad = (fixed * box_sum(alpha, k) - box_sum(alpha * s_f / n, k)
            - warped * box_sum(beta, k) + box_sum(beta * s_w / n, k)) / npx
    return cc, grad


def smoothness(field):
    """Mean squared forward difference of the displacement channels.

    Differences crossing the boundary are omitted; the normalizer is the
    pixel count, with both channels and both directions pooled.
    """
    if field.ndim != 3 or field.shape[0] != 2:
        raise ShapeError(f"field must be (2,H,W), got {field.shape}")
    npx = field.shape[1] * field.shape[2]
    dx = field[:, :, 1:] - field[:, :, :-1]
    dy = field[:, 1:, :] - field[:, :-1, :]
    s = (float(np.sum(dx * dx)) + float(np.sum(dy * dy))) / npx
    grad = np.zeros_like(field)
    grad[:, :, 1:] += 2.0 * dx
    grad[:, :, :-1] -= 2.0 * dx
    grad[:, 1:, :] += 2.0 * dy
    grad[:, :-1, :] -= 2.0 * dy
    grad /= npx
    return s, grad


def total_loss(fixed, moving, field, cfg=LossConfig()):
    """L = -local_cc(fixed, moving warped by field) + weight * smoothness.

    Returns (L, dL/dfield); the similarity gradient is routed through the
    warp's displacement derivative.
    """
    warped = warp_bilinear(moving, field)
    cc, g_warped = local_cc(fixed, warped, cfg)
    s, g_smooth = smoothness(field)
    loss = -cc + cfg.smooth_weight * s
    grad = warp_bilinear_backward(moving, field, -g_warped)
    grad += cfg.smooth_weight * g_smooth
    return loss, grad
