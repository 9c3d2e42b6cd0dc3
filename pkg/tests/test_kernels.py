import numpy as np
import pytest

from metareg import kernels as K
from metareg.errors import ConfigError, NumericError, ShapeError

from conftest import central_diff, rel_err


def conv2d_loops(x, w, b, stride):
    """Independent nested-loop convolution oracle."""
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.zeros((c_in, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    y = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for p in range(3):
                        for q in range(3):
                            acc += w[o, c, p, q] * xp[c, i * stride + p, j * stride + q]
                y[o, i, j] = acc
    return y


class TestConv2d:
    def test_identity_kernel(self, each_backend):
        rng = np.random.default_rng(0)
        x = rng.random((1, 4, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = K.conv2d(x, w, np.zeros(1), 1)
        np.testing.assert_array_equal(y, x)

    def test_bias_only(self, each_backend):
        x = np.random.default_rng(1).random((2, 5, 5))
        w = np.zeros((3, 2, 3, 3))
        b = np.full(3, 0.5)
        y = K.conv2d(x, w, b, 1)
        np.testing.assert_array_equal(y, np.full((3, 5, 5), 0.5))

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("shape", [(2, 5, 5, 3), (1, 4, 6, 2), (3, 8, 8, 4)])
    def test_matches_loop_oracle(self, each_backend, stride, shape):
        c_in, h, w_, c_out = shape
        rng = np.random.default_rng(42)
        x = rng.standard_normal((c_in, h, w_))
        w = rng.standard_normal((c_out, c_in, 3, 3))
        b = rng.standard_normal(c_out)
        y = K.conv2d(x, w, b, stride)
        expect = conv2d_loops(x, w, b, stride)
        assert rel_err(y, expect) <= 1e-12

    @pytest.mark.parametrize("stride", [1, 2])
    def test_backward_matches_finite_differences(self, each_backend, stride):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        proj = rng.standard_normal(K.conv2d(x, w, b, stride).shape)

        gx, gw, gb = K.conv2d_backward(x, w, proj, stride)
        fd_x = central_diff(lambda xx: float(np.sum(K.conv2d(xx, w, b, stride) * proj)), x)
        fd_w = central_diff(lambda ww: float(np.sum(K.conv2d(x, ww, b, stride) * proj)), w)
        fd_b = central_diff(lambda bb: float(np.sum(K.conv2d(x, w, bb, stride) * proj)), b)
        assert rel_err(gx, fd_x) <= 1e-4
        assert rel_err(gw, fd_w) <= 1e-4
        assert rel_err(gb, fd_b) <= 1e-4

    def test_linearity(self, each_backend):
        rng = np.random.default_rng(3)
        x1 = rng.standard_normal((2, 6, 6))
        x2 = rng.standard_normal((2, 6, 6))
        w = rng.standard_normal((4, 2, 3, 3))
        b0 = np.zeros(4)
        lhs = K.conv2d(1.7 * x1 - 0.3 * x2, w, b0, 1)
        rhs = 1.7 * K.conv2d(x1, w, b0, 1) - 0.3 * K.conv2d(x2, w, b0, 1)
        assert rel_err(lhs, rhs) <= 1e-10

    def test_shape_and_config_errors(self, each_backend):
        x = np.zeros((2, 4, 4))
        w = np.zeros((3, 5, 3, 3))
        with pytest.raises(ShapeError):
            K.conv2d(x, w, np.zeros(3), 1)
        with pytest.raises(ConfigError):
            K.conv2d(x, np.zeros((3, 2, 3, 3)), np.zeros(3), 3)
        with pytest.raises(ShapeError):
            K.conv2d(x, np.zeros((3, 2, 3, 3)), np.zeros(2), 1)

    def test_float32_matches_float64(self, each_backend):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        y64 = K.conv2d(x, w, b, 1)
        y32 = K.conv2d(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32), 1)
        assert y32.dtype == np.float32
        assert rel_err(y64, y32.astype(np.float64)) <= 1e-2


class TestLeakyRelu:
    def test_definition(self, each_backend):
        x = np.array([[[-1.0, 0.0, 2.0]]])
        np.testing.assert_allclose(K.leaky_relu(x, 0.2), [[[-0.2, 0.0, 2.0]]])

    def test_slope_near_one_is_identityish(self, each_backend):
        x = np.random.default_rng(0).standard_normal((2, 3, 3))
        y = K.leaky_relu(x, 1.0 - 1e-12)
        np.testing.assert_allclose(y, x, atol=1e-12)

    def test_gradient_matches_finite_differences(self, each_backend):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 5, 5))
        x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
        proj = rng.standard_normal(x.shape)
        g = K.leaky_relu_backward(x, proj, 0.2)
        fd = central_diff(lambda xx: float(np.sum(K.leaky_relu(xx, 0.2) * proj)), x)
        assert rel_err(g, fd) <= 1e-6

    def test_derivative_at_zero_uses_slope(self, each_backend):
        x = np.zeros((1, 1, 2))
        g = K.leaky_relu_backward(x, np.ones_like(x), 0.3)
        np.testing.assert_allclose(g, 0.3)

    def test_rejects_nonfinite(self, each_backend):
        with pytest.raises(NumericError):
            K.leaky_relu(np.array([[[np.nan]]]), 0.2)
        with pytest.raises(ConfigError):
            K.leaky_relu(np.zeros((1, 1, 1)), 1.5)


class TestUpsample2x:
    def test_definition(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        expect = [[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]]
        np.testing.assert_array_equal(K.upsample2x(x), expect)

    def test_constant_preserved(self):
        x = np.full((3, 4, 5), 2.5)
        np.testing.assert_array_equal(K.upsample2x(x), np.full((3, 8, 10), 2.5))

    def test_backward_counts_four(self):
        g = np.ones((2, 6, 8))
        np.testing.assert_array_equal(K.upsample2x_backward(g), np.full((2, 3, 4), 4.0))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 3, 4))
        proj = rng.standard_normal((1, 6, 8))
        g = K.upsample2x_backward(proj)
        fd = central_diff(lambda xx: float(np.sum(K.upsample2x(xx) * proj)), x)
        assert rel_err(g, fd) <= 1e-6


class TestConcat:
    def test_order(self):
        a = np.ones((1, 2, 2))
        b = np.zeros((1, 2, 2))
        y = K.concat_channels(a, b)
        assert y.shape == (2, 2, 2)
        np.testing.assert_array_equal(y[0], a[0])
        np.testing.assert_array_equal(y[1], b[0])

    def test_empty_identity(self):
        a = np.random.default_rng(0).random((3, 2, 2))
        y = K.concat_channels(a, np.zeros((0, 2, 2)))
        np.testing.assert_array_equal(y, a)

    def test_roundtrip_split(self):
        rng = np.random.default_rng(1)
        a = rng.random((2, 3, 3))
        b = rng.random((4, 3, 3))
        ra, rb = K.split_channels(K.concat_channels(a, b), 2)
        np.testing.assert_array_equal(ra, a)
        np.testing.assert_array_equal(rb, b)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            K.concat_channels(np.zeros((1, 2, 2)), np.zeros((1, 3, 2)))


class TestWarpBilinear:
    def test_zero_field_is_identity(self, each_backend):
        m = np.random.default_rng(0).random((5, 7))
        out = K.warp_bilinear(m, np.zeros((2, 5, 7)))
        np.testing.assert_array_equal(out, m)

    def test_integer_shift_with_clamp(self, each_backend):
        m = np.array([[0.0, 1.0], [2.0, 3.0]])
        field = np.zeros((2, 2, 2))
        field[0] = 1.0  # sample one column to the right
        np.testing.assert_array_equal(K.warp_bilinear(m, field), [[1, 1], [3, 3]])

    def test_half_pixel_shift(self, each_backend):
        m = np.array([[0.0, 1.0], [2.0, 3.0]])
        field = np.zeros((2, 2, 2))
        field[0] = 0.5
        np.testing.assert_allclose(K.warp_bilinear(m, field), [[0.5, 1.0], [2.5, 3.0]])

    def test_output_within_input_range(self, each_backend):
        rng = np.random.default_rng(2)
        m = rng.random((8, 8))
        field = rng.standard_normal((2, 8, 8)) * 5
        out = K.warp_bilinear(m, field)
        assert out.min() >= m.min() - 1e-15
        assert out.max() <= m.max() + 1e-15

    def test_field_gradient_matches_finite_differences(self, each_backend):
        rng = np.random.default_rng(3)
        m = rng.random((8, 8))
        # interior, non-integer sample points
        field = rng.uniform(0.2, 0.7, size=(2, 8, 8))
        field[:, :, :2] = 0.3
        proj = rng.standard_normal((8, 8))
        g = K.warp_bilinear_backward(m, field, proj)
        fd = central_diff(lambda f: float(np.sum(K.warp_bilinear(m, f) * proj)), field)
        assert rel_err(g, fd) <= 1e-5

    def test_shape_errors(self, each_backend):
        with pytest.raises(ShapeError):
            K.warp_bilinear(np.zeros((4, 4)), np.zeros((2, 3, 4)))
        with pytest.raises(ShapeError):
            K.warp_bilinear_backward(np.zeros((4, 4)), np.zeros((2, 4, 4)), np.zeros((3, 4)))


class TestBoxSum:
    def test_matches_loop_oracle(self, each_backend):
        rng = np.random.default_rng(4)
        img = rng.standard_normal((10, 12))
        for win in (3, 5, 9):
            out = K.box_sum(img, win)
            r = win // 2
            expect = np.zeros_like(img)
            for y in range(10):
                for x in range(12):
                    ys = slice(max(0, y - r), min(10, y + r + 1))
                    xs = slice(max(0, x - r), min(12, x + r + 1))
                    expect[y, x] = img[ys, xs].sum()
            assert rel_err(out, expect) <= 1e-12

    def test_window_larger_than_image(self, each_backend):
        img = np.random.default_rng(5).random((3, 3))
        out = K.box_sum(img, 9)
        np.testing.assert_allclose(out, img.sum())

    def test_rejects_even_window(self, each_backend):
        with pytest.raises(ConfigError):
            K.box_sum(np.zeros((4, 4)), 4)


class TestKernelGradientSweep:
    """Randomized finite-difference sweep over every differentiable kernel."""

    def test_all_ops_small_random(self, each_backend):
        rng = np.random.default_rng(12)
        for trial in range(3):
            x = rng.standard_normal((2, 8, 8))
            x[np.abs(x) < 1e-3] += 0.1
            w = rng.standard_normal((3, 2, 3, 3))
            b = rng.standard_normal(3)
            for stride in (1, 2):
                proj = rng.standard_normal(K.conv2d(x, w, b, stride).shape)
                gx, gw, gb = K.conv2d_backward(x, w, proj, stride)
                fd = central_diff(
                    lambda xx: float(np.sum(K.conv2d(xx, w, b, stride) * proj)), x)
                assert rel_err(gx, fd) <= 1e-4

            proj = rng.standard_normal(x.shape)
            g = K.leaky_relu_backward(x, proj, 0.2)
            fd = central_diff(lambda xx: float(np.sum(K.leaky_relu(xx, 0.2) * proj)), x)
            assert rel_err(g, fd) <= 1e-4

            m = rng.random((8, 8))
            field = rng.uniform(0.1, 0.9, size=(2, 8, 8))
            projw = rng.standard_normal((8, 8))
            g = K.warp_bilinear_backward(m, field, projw)
            fd = central_diff(lambda f: float(np.sum(K.warp_bilinear(m, f) * projw)), field)
            assert rel_err(g, fd) <= 1e-4
