"""Classical comparison methods: bilinear interpolation and non-local means."""

import numpy as np

from lfsr import kernels
from lfsr.degradation import awgn_std


def _axis_weights(n_in, scale):
    src = (np.arange(n_in * scale) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_upsample(lr, scale):
    """Align-corners-false bilinear upsampling with edge clamping."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    img = np.asarray(lr, dtype=np.float64)
    r0, r1, fr = _axis_weights(img.shape[0], scale)
    c0, c1, fc = _axis_weights(img.shape[1], scale)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def nearest_upsample(lr, scale):
    img = np.asarray(lr, dtype=np.float64)
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def nlm_denoise(img, h, patch=7, search=21, sigma_n=0.0):
    """Non-local means with weights exp(-max(d2 - 2 sigma_n^2, 0) / h^2).

    ``d2`` is the mean squared difference between the two patches. Borders
    are handled by reflection.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < search:
        raise ValueError(f"image {x.shape} smaller than the {search}x{search} search window")
    if h <= 0:
        raise ValueError("h must be positive")
    if patch % 2 == 0 or search % 2 == 0:
        raise ValueError("patch and search sizes must be odd")
    hp, hs = patch // 2, search // 2
    padded = np.ascontiguousarray(np.pad(x, hp + hs, mode="reflect"))
    return kernels.nlm(padded, x.shape[0], x.shape[1], hp, hs, float(h), float(sigma_n))


def b_nld(lr, scale, sigma, data_range=2.0, h_factor=0.8, denoise_first=True, patch=7, search=21):
    """Bilinear interpolation combined with non-local means denoising.

    The filter strength follows the noise level: h = h_factor * (sigma/255) * data_range.
    With ``sigma == 0`` this is plain bilinear upsampling.
    """
    if sigma == 0:
        return bilinear_upsample(lr, scale)
    noise = awgn_std(sigma, data_range)
    h = h_factor * noise
    if denoise_first:
        return bilinear_upsample(nlm_denoise(lr, h, patch, search, noise), scale)
    return nlm_denoise(bilinear_upsample(lr, scale), h, patch, search, noise)
