"""PSNR and SSIM for images in [0, 1], plus the SSIM gradient."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
PSNR_CAP = 99.0


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


_WINDOW = gaussian_window()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero padding; the window is symmetric so this is also its own adjoint
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _ssim_terms(x, y):
    mu1, mu2 = _blur(x), _blur(y)
    e11, e22, e12 = _blur(x * x), _blur(y * y), _blur(x * y)
    s11 = e11 - mu1 * mu1
    s22 = e22 - mu2 * mu2
    s12 = e12 - mu1 * mu2
    A1 = 2 * mu1 * mu2 + C1
    A2 = 2 * s12 + C2
    B1 = mu1 * mu1 + mu2 * mu2 + C1
    B2 = s11 + s22 + C2
    return mu1, mu2, A1, A2, B1, B2


def ssim_map(img1, img2) -> np.ndarray:
    x, y = _as_hwc(img1), _as_hwc(img2)
    _, _, A1, A2, B1, B2 = _ssim_terms(x, y)
    return (A1 * A2) / (B1 * B2)


def ssim(img1, img2) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), per channel."""
    return float(np.mean(ssim_map(img1, img2)))


def ssim_with_grad(img1, img2):
    """SSIM value and its gradient w.r.t. ``img1``."""
    x, y = _as_hwc(img1), _as_hwc(img2)
    mu1, mu2, A1, A2, B1, B2 = _ssim_terms(x, y)
    S = (A1 * A2) / (B1 * B2)
    g = 1.0 / S.size
    d_mu1 = g * S * (2 * mu2 / A1 - 2 * mu2 / A2 - 2 * mu1 / B1 + 2 * mu1 / B2)
    d_e11 = -g * S / B2
    d_e12 = 2 * g * S / A2
    grad = _blur(d_mu1) + 2 * x * _blur(d_e11) + y * _blur(d_e12)
    grad = grad.reshape(np.shape(img1))
    return float(np.mean(S)), grad


def mse(img1, img2) -> float:
    d = np.asarray(img1, dtype=np.float64) - np.asarray(img2, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(img1, img2) -> float:
    """10 log10(1 / MSE), capped at 99 dB for identical images."""
    err = mse(img1, img2)
    if err <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / err))
