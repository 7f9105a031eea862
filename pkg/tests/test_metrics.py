import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superscan.metrics import (bicubic_resize, cubic, evaluate, gaussian_window, psnr,
                               resize_taps, rgb_to_y, ssim, ssim_map)


class TestLuma:
    def test_reference_colours(self):
        img = np.array([[[0, 0, 0], [255, 255, 255], [255, 0, 0]]], np.uint8)
        y = rgb_to_y(img)[0]
        assert y[0] == 16.0
        assert abs(y[1] - 235.0) <= 1e-3
        assert y[2] == pytest.approx(81.481, abs=1e-9)

    @given(st.floats(0, 1), st.lists(st.floats(0, 1), min_size=3, max_size=3))
    @settings(max_examples=50, deadline=None)
    def test_linearity(self, alpha, p):
        p = np.array(p)
        assert abs(rgb_to_y(alpha * p) - (16 + alpha * (rgb_to_y(p) - 16))) <= 1e-6

    def test_wrong_channels(self):
        with pytest.raises(ValueError):
            rgb_to_y(np.zeros((2, 2, 4)))


class TestPsnr:
    def test_identical_is_inf(self, nprng):
        a = nprng.uniform(size=(8, 8))
        assert psnr(a, a) == math.inf

    def test_twenty_db(self, nprng):
        a = nprng.uniform(size=(16, 16))
        assert abs(psnr(a, a + 0.1) - 20.0) <= 1e-6

    def test_symmetric(self, nprng):
        a, b = nprng.uniform(size=(2, 12, 12))
        assert psnr(a, b, 1.0, 2) == psnr(b, a, 1.0, 2)

    def test_two_line_oracle(self, nprng):
        a, b = nprng.uniform(size=(2, 20, 20)) * 255
        mse = ((a[3:-3, 3:-3] - b[3:-3, 3:-3]) ** 2).mean()
        assert abs(psnr(a, b, 255.0, 3) - 10 * math.log10(255 ** 2 / mse)) <= 1e-9

    def test_errors(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.ones((4, 4)), border_crop=2)


def ssim_oracle(a, b, peak=1.0):
    """Explicit 11x11 Gaussian window at every valid position."""
    t = np.arange(11) - 5
    g = np.exp(-t * t / 4.5)
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    H, W = a.shape
    vals = []
    for i in range(H - 10):
        for j in range(W - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cv = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return np.mean(vals)


class TestSsim:
    def test_identical_exactly_one(self, nprng):
        a = nprng.uniform(size=(16, 16))
        assert ssim(a, a) == 1.0

    def test_inverse_below_one(self, nprng):
        a = nprng.uniform(size=(16, 16))
        assert ssim(a, 1 - a) < 1.0

    def test_sliding_window_oracle(self, nprng):
        a = nprng.uniform(size=(16, 18))
        b = np.clip(a + 0.1 * nprng.normal(size=a.shape), 0, 1)
        assert abs(ssim(a, b) - ssim_oracle(a, b)) <= 1e-6

    def test_bounds(self, nprng):
        for _ in range(10):
            a, b = nprng.normal(size=(2, 12, 12))
            m = ssim_map(a, b)
            assert np.all((m >= -1) & (m <= 1))

    def test_window(self):
        g = gaussian_window()
        assert g.shape == (11,) and abs(g.sum() - 1) < 1e-15 and g.argmax() == 5

    def test_undersized(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 20)), np.zeros((10, 20)))
        with pytest.raises(ValueError):
            ssim(np.zeros((14, 14)), np.zeros((14, 14)), border_crop=2)


def test_evaluate_on_u8(nprng):
    a = nprng.integers(0, 256, size=(20, 20, 3), dtype=np.uint8)
    p, s = evaluate(a, a, 4)
    assert p == math.inf and s == 1.0
    b = a.copy()
    b[5, 5] ^= 1
    p, s = evaluate(a, b, 4)
    assert 40 < p < math.inf and s < 1.0


class TestBicubic:
    def test_kernel_values(self):
        np.testing.assert_array_equal(cubic(np.array([0.0, 1.0, 2.0, -1.0, 2.5])), [1, 0, 0, 0, 0])
        # a = -0.5 at x = 0.5 and 1.5
        assert cubic(np.array([0.5]))[0] == 0.5625
        assert cubic(np.array([1.5]))[0] == -0.0625

    def test_scale_one_identity(self, nprng):
        x = nprng.uniform(size=(6, 7, 3))
        assert np.abs(bicubic_resize(x, 1) - x).max() <= 1e-7
        idx, w = resize_taps(7, 7)
        np.testing.assert_array_equal(idx[np.arange(7), w.argmax(1)], np.arange(7))
        np.testing.assert_array_equal(w.max(1), 1.0)

    @pytest.mark.parametrize("scale", [2, 3, 4])
    @pytest.mark.parametrize("direction", ["down", "up"])
    def test_constant_exact(self, scale, direction):
        x = np.full((12, 24, 3), 0.3137)
        np.testing.assert_array_equal(bicubic_resize(x, scale, direction), 0.3137)

    def test_upscale_impulse(self):
        x = np.zeros((16, 16))
        x[8, 8] = 1.0
        y = bicubic_resize(x, 2, "up")
        u = (np.arange(32) + 0.5) / 2 - 0.5
        k = cubic(u - 8)
        np.testing.assert_allclose(y, np.outer(k, k), atol=1e-15)

    def test_downscale_impulse(self):
        x = np.zeros((16, 16))
        x[8, 8] = 1.0
        y = bicubic_resize(x, 2)
        u = (np.arange(8) + 0.5) * 2 - 0.5
        k = cubic((u - 8) / 2) / 2
        np.testing.assert_allclose(y, np.outer(k, k), atol=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            bicubic_resize(np.zeros((5, 4)), 2)
        with pytest.raises(ValueError):
            bicubic_resize(np.zeros((4, 4)), 2, "sideways")
