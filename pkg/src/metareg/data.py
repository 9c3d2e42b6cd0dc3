"""Synthetic multi-domain registration tasks with exact ground truth,
plus the preprocessing steps applied to user-supplied images
(histogram equalization, bilinear resize, unit rescale).

Four texture families stand in for distinct imaging domains; each pair is
(moving, fixed = moving warped by a known smooth field + noise) together
with landmark correspondences placed on grid points, so the landmark
identity  (mx, my) = (fx + u(fx,fy), fy + v(fx,fy))  holds exactly.
"""
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .kernels import warp_bilinear

TEXTURE_KINDS = ("blobs", "curves", "checker", "ridges")


@dataclass(frozen=True)
class DomainSpec:
    texture_kind: str = "blobs"
    density: float = 1.0      # multiplier on the per-kind base element count
    thickness: float = 1.6    # curves: stroke radius in pixels
    frequency: float = 1.0    # checker: cell-size multiplier; ridges: frequency multiplier
    warp_sigma: float = 8.0   # smoothing scale of the random field, pixels
    warp_amplitude: float = 6.0  # max displacement magnitude, pixels
    noise_sigma: float = 0.02
    size: tuple = (64, 64)

    def __post_init__(self):
        if self.texture_kind not in TEXTURE_KINDS:
            raise ConfigError(f"unknown texture kind {self.texture_kind!r}")
        if self.warp_amplitude < 0:
            raise ConfigError("warp_amplitude must be >= 0")


@dataclass(frozen=True)
class LandmarkSet:
    """Paired correspondences; row i is (mx, my) in the moving frame and
    (fx, fy) in the fixed frame, backward-map convention."""
    points: np.ndarray  # (n, 4) columns mx, my, fx, fy

    def __len__(self):
        return self.points.shape[0]

    @property
    def moving(self):
        return self.points[:, 0:2]

    @property
    def fixed(self):
        return self.points[:, 2:4]


@dataclass
class PairSample:
    moving: np.ndarray
    fixed: np.ndarray
    gt_field: np.ndarray = None       # (2, H, W) or None
    landmarks: LandmarkSet = None


def _grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return ys.astype(np.float64), xs.astype(np.float64)


def _soft_threshold(img, level=0.5, sharpness=0.1):
    return 1.0 / (1.0 + np.exp(-(img - level) / sharpness))


def _blobs(spec, rng, h, w):
    n = max(10, int(round(spec.density * 40 * h * w / 4096)))
    img = np.zeros((h, w))
    ys, xs = _grid(h, w)
    for _ in range(n):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(2.0, 6.0)
        amp = rng.uniform(0.5, 1.0)
        y0, y1 = int(max(0, cy - 4 * sig)), int(min(h, cy + 4 * sig + 1))
        x0, x1 = int(max(0, cx - 4 * sig)), int(min(w, cx + 4 * sig + 1))
        d2 = (ys[y0:y1, x0:x1] - cy) ** 2 + (xs[y0:y1, x0:x1] - cx) ** 2
        img[y0:y1, x0:x1] += amp * np.exp(-d2 / (2 * sig * sig))
    return _soft_threshold(rescale_unit(img), 0.4, 0.15)


def _curves(spec, rng, h, w):
    # vessel-like strokes over a faint speckle background
    canvas = np.zeros((h, w))
    n = max(5, int(round(spec.density * 9 * max(h, w) / 64)))
    for _ in range(n):
        y = rng.uniform(0, h)
        x = rng.uniform(0, w)
        heading = rng.uniform(0, 2 * np.pi)
        for _step in range(int(1.6 * max(h, w))):
            heading += rng.normal(0.0, 0.25)
            y += np.sin(heading)
            x += np.cos(heading)
            if not (0 <= y < h - 1 and 0 <= x < w - 1):
                break
            iy, ix = int(y), int(x)
            fy, fx = y - iy, x - ix
            canvas[iy, ix] += (1 - fy) * (1 - fx)
            canvas[iy, ix + 1] += (1 - fy) * fx
            canvas[iy + 1, ix] += fy * (1 - fx)
            canvas[iy + 1, ix + 1] += fy * fx
    vessels = gaussian_filter(canvas, spec.thickness / 2.0)
    vessels = _soft_threshold(rescale_unit(vessels), 0.25, 0.08)
    background = rescale_unit(gaussian_filter(rng.standard_normal((h, w)), 1.2))
    return rescale_unit(0.68 * vessels + 0.32 * background)


def _checker(spec, rng, h, w):
    cell = max(3.0, 8.0 * spec.frequency * rng.uniform(0.8, 1.25))
    oy, ox = rng.uniform(0, cell, size=2)
    ys, xs = _grid(h, w)
    pattern = (np.floor((ys + oy) / cell) + np.floor((xs + ox) / cell)) % 2
    return rescale_unit(gaussian_filter(pattern, cell / 4.0))


def _ridges(spec, rng, h, w):
    ys, xs = _grid(h, w)
    img = np.zeros((h, w))
    for _ in range(4):
        theta = rng.uniform(0, np.pi)
        freq = 0.15 * spec.frequency * rng.uniform(0.6, 1.4)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.sin(2 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
    return rescale_unit(img)


_GENERATORS = {"blobs": _blobs, "curves": _curves, "checker": _checker, "ridges": _ridges}


def gen_texture(spec, seed):
    """Deterministic [0,1] texture image for (spec, seed)."""
    h, w = spec.size
    rng = np.random.default_rng(seed)
    return _GENERATORS[spec.texture_kind](spec, rng, h, w)


def gen_gt_field(spec, seed):
    """Smooth random displacement field with max magnitude warp_amplitude.

    White noise, Gaussian-smoothed at warp_sigma (periodic boundary, so
    the statistics are homogeneous across the grid), then rescaled so the
    largest displacement vector has exactly that length.
    """
    if spec.warp_sigma <= 0:
        raise ConfigError("warp_sigma must be > 0")
    h, w = spec.size
    if spec.warp_amplitude == 0:
        return np.zeros((2, h, w))
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((2, h, w))
    smooth = np.stack([gaussian_filter(raw[0], spec.warp_sigma, mode="wrap"),
                       gaussian_filter(raw[1], spec.warp_sigma, mode="wrap")])
    mag = np.hypot(smooth[0], smooth[1]).max()
    if mag == 0.0:
        return np.zeros((2, h, w))
    return smooth * (spec.warp_amplitude / mag)


def landmark_margin(spec):
    return int(np.ceil(spec.warp_amplitude)) + 2


def make_pair(spec, seed, n_landmarks=25):
    """Sample one registration pair with ground truth.

    fixed = clamp(warp(moving, gt_field) + clipped noise, 0, 1); each
    fixed-frame landmark sits on a grid point at least
    warp_amplitude + 2 pixels from the border, its moving-frame partner
    displaced by the exact field value there.
    """
    if n_landmarks < 0:
        raise ConfigError("n_landmarks must be >= 0")
    h, w = spec.size
    sub = np.random.SeedSequence(seed).generate_state(4)
    moving = gen_texture(spec, int(sub[0]))
    field = gen_gt_field(spec, int(sub[1]))
    warped = warp_bilinear(moving, field)
    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng(int(sub[2]))
        noise = noise_rng.normal(0.0, spec.noise_sigma, size=(h, w))
        noise = np.clip(noise, -3.5 * spec.noise_sigma, 3.5 * spec.noise_sigma)
        fixed = np.clip(warped + noise, 0.0, 1.0)
    else:
        fixed = warped

    landmarks = None
    if n_landmarks > 0:
        margin = landmark_margin(spec)
        hh, ww = h - 2 * margin, w - 2 * margin
        if hh < 1 or ww < 1 or hh * ww < n_landmarks:
            raise ConfigError(
                f"image {h}x{w} too small for {n_landmarks} landmarks at margin {margin}")
        lm_rng = np.random.default_rng(int(sub[3]))
        flat = lm_rng.choice(hh * ww, size=n_landmarks, replace=False)
        fy = flat // ww + margin
        fx = flat % ww + margin
        mx = fx + field[0, fy, fx]
        my = fy + field[1, fy, fx]
        landmarks = LandmarkSet(np.column_stack([mx, my, fx.astype(np.float64),
                                                 fy.astype(np.float64)]))
    return PairSample(moving=moving, fixed=fixed, gt_field=field, landmarks=landmarks)


def hist_equalize(img):
    """Classic CDF histogram equalization on 8-bit intensities."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ConfigError(f"hist_equalize expects uint8 input, got {img.dtype}")
    counts = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(counts)
    nonzero = cdf[counts > 0]
    if nonzero.size == 0:
        return img.copy()
    cdf_min = int(nonzero[0])
    total = int(cdf[-1])
    if total == cdf_min:  # constant image
        return np.zeros_like(img)
    lut = np.rint((cdf - cdf_min) / (total - cdf_min) * 255.0)
    return np.clip(lut, 0, 255).astype(np.uint8)[img]


def resize_bilinear(img, out_hw):
    """Bilinear resample with corner-aligned coordinates."""
    h2, w2 = out_hw
    if h2 < 2 or w2 < 2:
        raise ConfigError(f"output dims must be >= 2, got {out_hw}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h2, w2) == (h, w):
        return img.copy()
    sy = np.arange(h2) * ((h - 1) / (h2 - 1))
    sx = np.arange(w2) * ((w - 1) / (w2 - 1))
    y0 = np.minimum(sy.astype(np.int64), h - 2)
    x0 = np.minimum(sx.astype(np.int64), w - 2)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x0 + 1)]
    c = img[np.ix_(y0 + 1, x0)]
    d = img[np.ix_(y0 + 1, x0 + 1)]
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    return top + fy * (bot - top)


def rescale_unit(img):
    """Affine map onto [0,1]; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo = img.min()
    hi = img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)
