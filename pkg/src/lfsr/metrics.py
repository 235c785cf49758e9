"""Image-quality and detection-quality metrics."""

import enum
import math
from dataclasses import dataclass, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    row0: int
    col0: int
    height: int
    width: int

    def __post_init__(self):
        if self.row0 < 0 or self.col0 < 0:
            raise MetricError(f"negative box origin ({self.row0}, {self.col0})")
        if self.height <= 0 or self.width <= 0:
            raise MetricError(f"non-positive box extent {self.height}x{self.width}")

    @property
    def row1(self):
        return self.row0 + self.height

    @property
    def col1(self):
        return self.col0 + self.width

    def clamp(self, shape):
        r0 = min(max(self.row0, 0), shape[0] - 1)
        c0 = min(max(self.col0, 0), shape[1] - 1)
        return BoundingBox(r0, c0, min(self.row1, shape[0]) - r0, min(self.col1, shape[1]) - c0)

    def contains(self, other: "BoundingBox"):
        return (self.row0 <= other.row0 and self.col0 <= other.col0
                and self.row1 >= other.row1 and self.col1 >= other.col1)


class Grade(enum.Enum):
    PERFECT = "perfect"
    ACCEPTABLE = "acceptable"
    MISS = "miss"


def _pair(pred, ref):
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, ref, data_range=2.0):
    """Peak signal-to-noise ratio in dB against a fixed ``data_range``.

    Returns ``math.inf`` when the images are identical.
    """
    a, b = _pair(pred, ref)
    if data_range <= 0:
        raise MetricError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    k = g.size
    tmp = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(tmp, k, axis=1) @ g


def ssim_map(pred, ref, data_range=2.0, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    a, b = _pair(pred, ref)
    if a.ndim != 2 or min(a.shape) < win_size:
        raise MetricError(f"SSIM needs a 2-D image of at least {win_size}x{win_size}, got {a.shape}")
    g = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(pred, ref, data_range=2.0, **kw):
    """Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5)."""
    return float(np.mean(ssim_map(pred, ref, data_range, **kw)))


def coverage(box: BoundingBox, lesion_mask):
    """Fraction of lesion pixels falling inside ``box``."""
    mask = np.asarray(lesion_mask) > 0
    total = int(mask.sum())
    if total == 0:
        raise MetricError("coverage undefined for an empty lesion mask")
    inside = int(mask[box.row0 : box.row1, box.col0 : box.col1].sum())
    return inside / total


def detection_grade(cov: float, tol=1e-12) -> Grade:
    if not -tol <= cov <= 1.0 + tol:
        raise MetricError(f"coverage {cov} outside [0, 1]")
    if cov >= 1.0 - tol:
        return Grade.PERFECT
    if cov >= 0.95:
        return Grade.ACCEPTABLE
    return Grade.MISS


@dataclass
class SampleMetrics:
    psnr: float
    ssim: float
    grade: Grade
    sample_id: int = -1


@dataclass
class MetricReport:
    method: str
    scale: int
    sigma: float
    psnr_mean: float
    ssim_mean: float
    perfect: int
    acceptable: int
    miss: int
    n: int
    n_inf_psnr: int = 0

    COLUMNS = ("method", "scale", "sigma", "psnr", "ssim", "perfect", "acceptable", "miss")

    def row(self):
        return (f"{self.method:<10} {self.scale:>5d} {self.sigma:>5g} {self.psnr_mean:>8.3f} "
                f"{self.ssim_mean:>7.4f} {self.perfect:>7d} {self.acceptable:>10d} {self.miss:>5d}")

    def to_record(self):
        rec = asdict(self)
        rec.pop("COLUMNS", None)
        return rec


def aggregate(results, method="", scale=0, sigma=0.0) -> MetricReport:
    """Means over samples; infinite PSNRs are excluded from the mean and counted."""
    results = list(results)
    if not results:
        raise MetricError("cannot aggregate an empty result list")
    finite = [r.psnr for r in results if math.isfinite(r.psnr)]
    n_inf = len(results) - len(finite)
    psnr_mean = float(np.mean(finite)) if finite else math.inf
    counts = {g: 0 for g in Grade}
    for r in results:
        counts[r.grade] += 1
    return MetricReport(method, scale, sigma, psnr_mean, float(np.mean([r.ssim for r in results])),
                        counts[Grade.PERFECT], counts[Grade.ACCEPTABLE], counts[Grade.MISS],
                        len(results), n_inf)


def format_table(reports):
    head = (f"{'method':<10} {'scale':>5} {'sigma':>5} {'psnr':>8} {'ssim':>7} "
            f"{'perfect':>7} {'acceptable':>10} {'miss':>5}")
    return "\n".join([head] + [r.row() for r in reports]) + "\n"
