import numpy as np
import pytest

from metareg.data import (DomainSpec, TEXTURE_KINDS, gen_gt_field, gen_texture,
                          hist_equalize, make_pair, rescale_unit, resize_bilinear)
from metareg.errors import ConfigError
from metareg.kernels import warp_bilinear
from metareg.loss import smoothness


def window_variances(img, win=9):
    h, w = img.shape
    out = []
    for y in range(0, h - win + 1, 3):
        for x in range(0, w - win + 1, 3):
            out.append(img[y : y + win, x : x + win].var())
    return np.asarray(out)


def hist16(img):
    h, _ = np.histogram(img, bins=16, range=(0.0, 1.0))
    return h / h.sum()


def chi2(p, q):
    denom = p + q
    mask = denom > 0
    return 0.5 * np.sum((p[mask] - q[mask]) ** 2 / denom[mask])


class TestGenTexture:
    @pytest.mark.parametrize("kind", TEXTURE_KINDS)
    def test_deterministic(self, kind):
        spec = DomainSpec(texture_kind=kind)
        a = gen_texture(spec, 123)
        b = gen_texture(spec, 123)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, gen_texture(spec, 124))

    @pytest.mark.parametrize("kind", TEXTURE_KINDS)
    def test_range_contract(self, kind):
        spec = DomainSpec(texture_kind=kind)
        for seed in range(100):
            img = gen_texture(spec, seed)
            assert img.min() >= 0.0 and img.max() <= 1.0

    @pytest.mark.parametrize("kind", TEXTURE_KINDS)
    def test_window_variance_informative(self, kind):
        spec = DomainSpec(texture_kind=kind)
        fracs = []
        for seed in range(10):
            v = window_variances(gen_texture(spec, seed))
            fracs.append(np.mean(v >= 1e-3))
        assert np.mean(fracs) >= 0.9

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            DomainSpec(texture_kind="plaid")

    def test_families_statistically_distinct(self):
        n = 50
        hists = {k: [hist16(gen_texture(DomainSpec(texture_kind=k), s))
                     for s in range(n)] for k in TEXTURE_KINDS}
        rng = np.random.default_rng(0)
        for ka in TEXTURE_KINDS:
            within = [chi2(hists[ka][i], hists[ka][j])
                      for i, j in zip(rng.integers(0, n, 200), rng.integers(0, n, 200))
                      if i != j]
            for kb in TEXTURE_KINDS:
                if ka == kb:
                    continue
                between = [chi2(hists[ka][i], hists[kb][j])
                           for i, j in zip(rng.integers(0, n, 200), rng.integers(0, n, 200))]
                assert np.median(between) > np.median(within), (ka, kb)


class TestGenGtField:
    def test_zero_amplitude(self):
        spec = DomainSpec(warp_amplitude=0.0)
        np.testing.assert_array_equal(gen_gt_field(spec, 0), np.zeros((2, 64, 64)))

    def test_max_magnitude_exact(self):
        for seed in range(20):
            spec = DomainSpec(warp_amplitude=5.5)
            f = gen_gt_field(spec, seed)
            assert abs(np.hypot(f[0], f[1]).max() - 5.5) <= 1e-9

    def test_smoothness_decreases_with_sigma(self):
        vals = []
        for sigma in (1.0, 2.0, 4.0, 8.0):
            spec = DomainSpec(warp_amplitude=4.0, warp_sigma=sigma)
            vals.append(smoothness(gen_gt_field(spec, 42))[0])
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_deterministic(self):
        spec = DomainSpec()
        np.testing.assert_array_equal(gen_gt_field(spec, 9), gen_gt_field(spec, 9))


class TestMakePair:
    def test_identity_task(self):
        spec = DomainSpec(noise_sigma=0.0, warp_amplitude=0.0)
        s = make_pair(spec, 5)
        np.testing.assert_array_equal(s.fixed, s.moving)
        np.testing.assert_array_equal(s.landmarks.moving, s.landmarks.fixed)

    def test_landmark_identity_exact(self):
        # definitional form: the moving point IS the fixed grid point plus
        # the field value there, bit-exactly
        for seed in range(10):
            s = make_pair(DomainSpec(), seed)
            fx = s.landmarks.points[:, 2].astype(int)
            fy = s.landmarks.points[:, 3].astype(int)
            np.testing.assert_array_equal(
                s.landmarks.points[:, 0], s.landmarks.points[:, 2] + s.gt_field[0, fy, fx])
            np.testing.assert_array_equal(
                s.landmarks.points[:, 1], s.landmarks.points[:, 3] + s.gt_field[1, fy, fx])

    def test_fixed_is_warp_plus_bounded_noise(self):
        spec = DomainSpec(noise_sigma=0.02)
        for seed in range(5):
            s = make_pair(spec, seed)
            warped = warp_bilinear(s.moving, s.gt_field)
            assert np.abs(s.fixed - warped).max() <= 4 * spec.noise_sigma

    def test_not_deformed_distance_fraction_of_amplitude(self):
        spec = DomainSpec()
        ratios = []
        for seed in range(100):
            s = make_pair(spec, seed)
            d = np.hypot(s.landmarks.points[:, 0] - s.landmarks.points[:, 2],
                         s.landmarks.points[:, 1] - s.landmarks.points[:, 3]).mean()
            ratios.append(d / spec.warp_amplitude)
        assert 0.3 <= np.mean(ratios) <= 1.0

    def test_landmarks_inside_bounds_with_margin(self):
        s = make_pair(DomainSpec(), 3)
        pts = s.landmarks.points
        assert (pts[:, 0] >= 0).all() and (pts[:, 0] <= 63).all()
        assert (pts[:, 1] >= 0).all() and (pts[:, 1] <= 63).all()
        assert (pts[:, 2] >= 8).all() and (pts[:, 2] <= 55).all()

    def test_margin_infeasible_raises(self):
        spec = DomainSpec(size=(16, 16), warp_amplitude=6.0)
        with pytest.raises(ConfigError):
            make_pair(spec, 0, n_landmarks=25)

    def test_stream_reproducible(self):
        spec = DomainSpec(texture_kind="ridges")
        a = make_pair(spec, 77)
        b = make_pair(spec, 77)
        np.testing.assert_array_equal(a.moving, b.moving)
        np.testing.assert_array_equal(a.fixed, b.fixed)
        np.testing.assert_array_equal(a.landmarks.points, b.landmarks.points)


class TestHistEqualize:
    def test_half_black_half_white_unchanged(self):
        img = np.zeros((16, 16), dtype=np.uint8)
        img[8:] = 255
        np.testing.assert_array_equal(hist_equalize(img), img)

    def test_uniform_ramp_identity(self):
        img = np.arange(256, dtype=np.uint8).reshape(16, 16)
        np.testing.assert_array_equal(hist_equalize(img), img)

    def test_constant_maps_to_zero(self):
        img = np.full((8, 8), 7, dtype=np.uint8)
        np.testing.assert_array_equal(hist_equalize(img), 0)

    def test_flattens_histogram(self):
        rng = np.random.default_rng(0)
        img = np.clip(rng.normal(100, 12, size=(64, 64)), 0, 255).astype(np.uint8)
        out = hist_equalize(img)

        def peak_ratio(a):
            c = np.bincount(a.ravel(), minlength=256)
            nz = c[c > 0]
            return nz.max() / nz.min()

        assert peak_ratio(out) <= peak_ratio(img)

    def test_rejects_float_input(self):
        with pytest.raises(ConfigError):
            hist_equalize(np.zeros((4, 4)))


class TestResizeBilinear:
    def test_same_size_is_bit_exact_identity(self):
        img = np.random.default_rng(1).random((12, 9))
        np.testing.assert_array_equal(resize_bilinear(img, (12, 9)), img)

    def test_constant_stays_constant(self):
        img = np.full((5, 7), 0.42)
        np.testing.assert_allclose(resize_bilinear(img, (11, 13)), 0.42, rtol=0, atol=1e-15)

    def test_2x2_to_3x3_center(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = resize_bilinear(img, (3, 3))
        assert out[1, 1] == pytest.approx(1.5, abs=1e-15)

    def test_output_within_input_range(self):
        rng = np.random.default_rng(2)
        img = rng.random((10, 10))
        out = resize_bilinear(img, (23, 17))
        assert out.min() >= img.min() - 1e-15
        assert out.max() <= img.max() + 1e-15

    def test_tiny_output_rejected(self):
        with pytest.raises(ConfigError):
            resize_bilinear(np.zeros((4, 4)), (1, 5))


class TestRescaleUnit:
    def test_affine_map(self):
        np.testing.assert_allclose(rescale_unit(np.array([[0.0, 128.0, 255.0]])),
                                   [[0.0, 128 / 255, 1.0]])

    def test_constant_to_zeros(self):
        np.testing.assert_array_equal(rescale_unit(np.full((3, 3), 7.0)), 0.0)

    def test_idempotent_on_unit_spanning(self):
        rng = np.random.default_rng(3)
        img = rng.random((8, 8))
        img[0, 0], img[-1, -1] = 0.0, 1.0
        np.testing.assert_allclose(rescale_unit(img), img, rtol=0, atol=1e-12)
