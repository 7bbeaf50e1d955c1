"""Image quality metrics on float images in [0, 1]."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
# the coarsest of five scales must still hold one full window
MS_SSIM_MIN_SIZE = SSIM_WINDOW * 2 ** (len(MS_SSIM_WEIGHTS) - 1)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter(img, g):
    """Separable 'valid' filtering of (H, W, C) along both image axes."""
    k = g.size
    out = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(out, k, axis=1) @ g


def _ssim_maps(a, b, data_range):
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    var_a = _filter(a * a, g) - mu_a**2
    var_b = _filter(b * b, g) - mu_b**2
    cov = _filter(a * b, g) - mu_a * mu_b
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return lum * cs, cs


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM over the valid region, averaged over channels."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW} px per side")
    s, _ = _ssim_maps(a, b, data_range)
    return float(s.mean())


def _pool(img):
    H, W = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:H, :W]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(a, b, data_range: float = 1.0) -> float:
    """Five-scale MS-SSIM; negative per-scale terms are clamped to zero."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < MS_SSIM_MIN_SIZE:
        raise ValueError(f"MS-SSIM needs images of at least {MS_SSIM_MIN_SIZE} px per side, "
                         f"got {a.shape[0]}x{a.shape[1]}")
    levels = len(MS_SSIM_WEIGHTS)
    weights = np.asarray(MS_SSIM_WEIGHTS)
    terms = []
    for level in range(levels):
        s, cs = _ssim_maps(a, b, data_range)
        per_channel = (s if level == levels - 1 else cs).mean(axis=(0, 1))
        terms.append(np.maximum(per_channel, 0.0))
        a, b = _pool(a), _pool(b)
    terms = np.stack(terms)  # (levels, C)
    return float(np.mean(np.prod(terms ** weights[:, None], axis=0)))
