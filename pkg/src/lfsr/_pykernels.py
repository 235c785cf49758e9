"""Pure numpy implementations of the hot kernels.

Signatures mirror ``_ckernels.pyx`` exactly; ``lfsr.kernels`` picks one of
the two at import time.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    """Unfold a padded (N, C, Hp, Wp) array into (N*ho*wo, C*kh*kw) rows."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add rows produced by :func:`im2col` back onto the padded grid."""
    out = np.zeros((n, c, hp, wp))
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def _box_mean(a, k):
    s = np.cumsum(np.cumsum(a, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    return (s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]) / (k * k)


def nlm(padded, height, width, half_patch, half_search, h, sigma_n):
    """Non-local means over a reflect-padded image.

    ``padded`` carries ``half_patch + half_search`` extra pixels per side.
    Patch distance is the mean squared difference over the patch.
    """
    p = half_patch + half_search
    k = 2 * half_patch + 1
    ref = padded[half_search : half_search + height + 2 * half_patch,
                 half_search : half_search + width + 2 * half_patch]
    acc = np.zeros((height, width))
    wsum = np.zeros((height, width))
    bias = 2.0 * sigma_n * sigma_n
    inv_h2 = 1.0 / (h * h)
    for dy in range(-half_search, half_search + 1):
        for dx in range(-half_search, half_search + 1):
            moved = padded[half_search + dy : half_search + dy + height + 2 * half_patch,
                           half_search + dx : half_search + dx + width + 2 * half_patch]
            d2 = _box_mean((ref - moved) ** 2, k)
            w = np.exp(-np.maximum(d2 - bias, 0.0) * inv_h2)
            acc += w * padded[p + dy : p + dy + height, p + dx : p + dx + width]
            wsum += w
    return acc / wsum
