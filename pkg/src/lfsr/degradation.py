"""Low-resolution acquisition simulation in k-space.

HR images are transformed with an orthonormal radix-2 FFT, truncated to
their central low-frequency block, optionally corrupted with complex white
Gaussian noise, and transformed back. Images are plain 2-D numpy arrays.
"""

from dataclasses import dataclass

import numpy as np

from lfsr.rng import derive_rng


class DegradationError(ValueError):
    pass


@dataclass
class KSpaceGrid:
    """Orthonormal 2-D spectrum in natural (unshifted) FFT order."""

    height: int
    width: int
    re: np.ndarray
    im: np.ndarray
    norm: str = "ortho"

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z)
        return cls(z.shape[0], z.shape[1], np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    @property
    def values(self):
        return self.re + 1j * self.im

    def energy(self):
        return float(np.sum(self.re ** 2 + self.im ** 2))


@dataclass(frozen=True)
class DegradeConfig:
    scale: int = 2
    sigma: float = 0.0
    seed: int = 0
    data_range: float | None = None  # None: use max - min of the HR image
    noise_before_truncation: bool = False
    method: str = "kspace"  # or "decimate" (block average in image space)

    def __post_init__(self):
        if self.scale < 1:
            raise DegradationError(f"scale must be >= 1, got {self.scale}")
        if self.sigma < 0:
            raise DegradationError(f"sigma must be >= 0, got {self.sigma}")
        if self.method not in ("kspace", "decimate"):
            raise DegradationError(f"unknown downsampling method {self.method!r}")


def _is_pow2(n):
    return n > 0 and n & (n - 1) == 0


def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft1(x, inverse=False):
    """Unnormalized iterative radix-2 DFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise DegradationError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    a = x[..., _bit_reverse(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        a = a.reshape(lead + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(lead + (n,))


def _check_dims(h, w):
    if not (_is_pow2(h) and _is_pow2(w)):
        raise DegradationError(f"image dims must be powers of two, got {h}x{w}")


def fft2(image) -> KSpaceGrid:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DegradationError(f"fft2 expects a 2-D image, got shape {img.shape}")
    h, w = img.shape
    _check_dims(h, w)
    z = fft1(fft1(img).swapaxes(0, 1)).swapaxes(0, 1) / np.sqrt(h * w)
    return KSpaceGrid.from_complex(z)


def ifft2_complex(k: KSpaceGrid):
    _check_dims(k.height, k.width)
    z = fft1(fft1(k.values, inverse=True).swapaxes(0, 1), inverse=True).swapaxes(0, 1)
    return z / np.sqrt(k.height * k.width)


def ifft2(k: KSpaceGrid):
    """Real part of the orthonormal inverse transform."""
    return np.ascontiguousarray(ifft2_complex(k).real)


def kspace_downsample(k: KSpaceGrid, scale: int) -> KSpaceGrid:
    """Keep the central (H/scale, W/scale) frequency block, rescaled by 1/scale."""
    if k.height % scale or k.width % scale:
        raise DegradationError(f"grid {k.height}x{k.width} not divisible by scale {scale}")
    h, w = k.height // scale, k.width // scale
    z = np.fft.fftshift(k.values)
    r0, c0 = k.height // 2 - h // 2, k.width // 2 - w // 2
    z = z[r0 : r0 + h, c0 : c0 + w]
    return KSpaceGrid.from_complex(np.fft.ifftshift(z) / scale)


def kspace_upsample(k: KSpaceGrid, scale: int) -> KSpaceGrid:
    """Zero-pad the spectrum (ideal sinc interpolation); inverse of truncation."""
    hh, ww = k.height * scale, k.width * scale
    z = np.zeros((hh, ww), dtype=np.complex128)
    r0, c0 = hh // 2 - k.height // 2, ww // 2 - k.width // 2
    z[r0 : r0 + k.height, c0 : c0 + k.width] = np.fft.fftshift(k.values)
    return KSpaceGrid.from_complex(np.fft.ifftshift(z) * scale)


def awgn_std(sigma, data_range):
    """Per-component k-space noise std for a 0-255 ``sigma`` on ``data_range``."""
    return sigma / 255.0 * data_range


def add_kspace_awgn(k: KSpaceGrid, sigma: float, rng, data_range: float = 2.0) -> KSpaceGrid:
    """Circularly symmetric complex Gaussian noise on every coefficient.

    Real and imaginary parts each get std ``(sigma/255) * data_range``, so
    the real part of the inverse transform carries spatial noise with that
    same std.
    """
    if sigma < 0:
        raise DegradationError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return KSpaceGrid(k.height, k.width, k.re.copy(), k.im.copy(), k.norm)
    s = awgn_std(sigma, data_range)
    noise = rng.normal(size=(2, k.height, k.width)) * s
    return KSpaceGrid(k.height, k.width, k.re + noise[0], k.im + noise[1], k.norm)


def normalize(image, eps=1e-12):
    """Zero-mean, unit-variance copy of ``image`` plus the (mean, std) used."""
    img = np.asarray(image, dtype=np.float64)
    mu = float(img.mean())
    sd = float(img.std())
    if sd <= eps:
        raise DegradationError("cannot normalize a (near-)constant image")
    return (img - mu) / sd, mu, sd


def denormalize(image, mean, std):
    return np.asarray(image) * std + mean


def block_average(image, scale):
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if h % scale or w % scale:
        raise DegradationError(f"image {h}x{w} not divisible by scale {scale}")
    return img.reshape(h // scale, scale, w // scale, scale).mean(axis=(1, 3))


def degrade(hr, cfg: DegradeConfig, sample_id: int = 0):
    """HR image -> simulated LR acquisition. Pure in (hr, cfg, sample_id)."""
    hr = np.asarray(hr, dtype=np.float64)
    if hr.shape[0] % cfg.scale or hr.shape[1] % cfg.scale:
        raise DegradationError(f"HR dims {hr.shape} not divisible by scale {cfg.scale}")
    data_range = cfg.data_range if cfg.data_range is not None else float(hr.max() - hr.min())
    rng = derive_rng(cfg.seed, "awgn", sample_id)
    if cfg.method == "decimate":
        k = fft2(block_average(hr, cfg.scale))
        return ifft2(add_kspace_awgn(k, cfg.sigma, rng, data_range))
    k = fft2(hr)
    if cfg.noise_before_truncation:
        return ifft2(kspace_downsample(add_kspace_awgn(k, cfg.sigma, rng, data_range), cfg.scale))
    return ifft2(add_kspace_awgn(kspace_downsample(k, cfg.scale), cfg.sigma, rng, data_range))
