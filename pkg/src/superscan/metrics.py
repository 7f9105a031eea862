"""Luma conversion, PSNR/SSIM and antialiased bicubic resizing.

Images are ``[H, W, 3]`` arrays. ``uint8`` inputs are divided by 255 first;
float inputs are taken to lie in [0, 1].
"""
from __future__ import annotations

import math

import numpy as np

# studio-swing BT.601 luma, RGB in [0, 1] -> Y in [16, 235]
Y_OFFSET = 16.0
Y_COEFFS = np.array([65.481, 128.553, 24.966])


def to_unit(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64, copy=False)


def rgb_to_y(img) -> np.ndarray:
    """[H, W, 3] RGB -> [H, W] luma on the 0..255 scale."""
    x = to_unit(img)
    if x.shape[-1] != 3:
        raise ValueError(f"expected a trailing RGB axis of 3, got shape {x.shape}")
    return Y_OFFSET + x @ Y_COEFFS


def _crop(x, border: int):
    if border < 0:
        raise ValueError(f"border_crop must be >= 0, got {border}")
    return x[border:x.shape[0] - border, border:x.shape[1] - border] if border else x


def psnr(a, b, peak: float = 1.0, border_crop: int = 0) -> float:
    """10 log10(peak^2 / MSE) over the cropped region; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = _crop(a, border_crop) - _crop(b, border_crop)
    if d.size == 0:
        raise ValueError("nothing left after border crop")
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' correlation of a 2-D map with the 1-D kernel ``g``."""
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a, b, peak: float = 1.0, size: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < size:
        raise ValueError(f"SSIM needs a 2-D map at least {size}x{size}, got {a.shape}")
    g = gaussian_window(size, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float = 1.0, border_crop: int = 0, **kw) -> float:
    """Mean of the local SSIM map (Gaussian window, no padding)."""
    return float(np.mean(ssim_map(_crop(np.asarray(a), border_crop),
                                  _crop(np.asarray(b), border_crop), peak, **kw)))


def evaluate(sr, hr, scale: int) -> tuple[float, float]:
    """Y-channel (PSNR, SSIM) with a ``scale``-pixel border crop, on the 0..255 scale."""
    ya, yb = rgb_to_y(sr), rgb_to_y(hr)
    return psnr(ya, yb, 255.0, scale), ssim(ya, yb, 255.0, scale)


# -- bicubic -------------------------------------------------------------------------

CUBIC_A = -0.5


def cubic(x, a: float = CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _symmetric(idx, n):
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def resize_taps(n_in: int, n_out: int):
    """Source indices and weights (rows sum to one) for a 1-D cubic resize.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) n_in / n_out - 0.5``.
    When shrinking, the kernel is stretched by the shrink factor (antialiasing).
    Out-of-range taps mirror with the edge sample repeated.
    """
    f = n_out / n_in
    width = 4.0 / f if f < 1 else 4.0
    u = (np.arange(n_out) + 0.5) / f - 0.5
    left = np.floor(u - width / 2).astype(int) + 1
    taps = int(math.ceil(width)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    w = cubic(dist * f) if f < 1 else cubic(dist)
    w = w / w.sum(axis=1, keepdims=True)
    keep = np.any(w != 0, axis=0)
    return _symmetric(idx[:, keep], n_in), w[:, keep]


def _resize_axis(x, n_out: int, axis: int):
    idx, w = resize_taps(x.shape[axis], n_out)
    x = np.moveaxis(x, axis, 0)
    ref = x[idx[:, 0]]
    # x_ref + sum w (x_j - x_ref) keeps constant signals exactly constant
    out = ref.copy()
    for t in range(idx.shape[1]):
        wt = w[:, t].reshape((-1,) + (1,) * (x.ndim - 1))
        out += wt * (x[idx[:, t]] - ref)
    return np.moveaxis(out, 0, axis)


def bicubic_resize(img, scale: int, direction: str = "down") -> np.ndarray:
    """Resize the two leading axes of ``img`` by an integer ``scale``.

    Float64 output; uint8 inputs stay on the 0..255 scale.
    """
    if direction not in ("down", "up"):
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    x = np.asarray(img, dtype=np.float64)
    H, W = x.shape[:2]
    if direction == "down":
        if H % scale or W % scale:
            raise ValueError(f"extents {H}x{W} not divisible by scale {scale}")
        Ho, Wo = H // scale, W // scale
    else:
        Ho, Wo = H * scale, W * scale
    if scale == 1:
        return x.copy()
    return _resize_axis(_resize_axis(x, Ho, 0), Wo, 1)
