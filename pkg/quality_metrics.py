"""
Image Quality Metrics
PSNR and SSIM on images clamped to [0, 1]
"""

import math

import numpy as np
from scipy.signal import convolve2d

from errors import ShapeError

PSNR_IDENTICAL = math.inf


def _prepare(a, b):
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    if a.shape != b.shape:
        raise ShapeError("image metric", a.shape, b.shape)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE); identical images give the +inf sentinel"""
    a, b = _prepare(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """
    Structural similarity with a Gaussian window, averaged over channels

    Args:
        a, b: H x W (x C) images in [0, 1]
        window_size: Gaussian window side (clipped to the image size)
        sigma: window standard deviation
        k1, k2: stabilizing constants

    Returns:
        mean SSIM
    """
    a, b = _prepare(a, b)
    size = min(window_size, a.shape[0], a.shape[1])
    window = gaussian_window(size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2

    def filt(x):
        return convolve2d(x, window, mode="valid")

    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x, mu_y = filt(x), filt(y)
        sxx = filt(x * x) - mu_x ** 2
        syy = filt(y * y) - mu_y ** 2
        sxy = filt(x * y) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
