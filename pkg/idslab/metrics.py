"""
Fidelity and identity metrics for IDS Lab
MSE/PSNR, SSIM, background PSNR, IoU and the identity residual
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.signal import convolve2d
from typing_extensions import Literal

from .core import Latent, check_same_shape
from .errors import DomainError, MetricUnsupportedError, ShapeError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03

ThresholdMode = Literal["mean", "median"]


class Sentinel(str, enum.Enum):
    """Metric outcomes that are not finite numbers"""
    INFINITE = "inf"
    UNDEFINED = "undefined"


MetricValue = Union[float, Sentinel]


def mse(a: Latent, b: Latent) -> float:
    check_same_shape(a, b, "metric inputs")
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def psnr_from_mse(err: float, peak: float) -> MetricValue:
    if peak <= 0:
        raise DomainError(f"PSNR peak must be positive, got {peak}")
    if err == 0.0:
        return Sentinel.INFINITE
    return 10.0 * math.log10(peak ** 2 / err)


def psnr(a: Latent, b: Latent, peak: float) -> MetricValue:
    return psnr_from_mse(mse(a, b), peak)


def dynamic_range(x: Latent) -> float:
    """max - min of an image, 1.0 for constant images"""
    span = float(np.max(x) - np.min(x))
    return span if span > 0 else 1.0


def _check_grid(x: Latent, min_side: int, what: str) -> None:
    if np.ndim(x) != 2:
        raise MetricUnsupportedError(f"{what} needs a 2-D grid latent, got shape {np.shape(x)}")
    if min(np.shape(x)) < min_side:
        raise MetricUnsupportedError(f"{what} needs grids of at least {min_side}x{min_side}, got {np.shape(x)}")


def _window_sums(x: np.ndarray) -> np.ndarray:
    return convolve2d(x, np.ones((SSIM_WINDOW, SSIM_WINDOW)), mode="valid")


@dataclass(frozen=True)
class _SsimTerms:
    mu_a: np.ndarray
    mu_b: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    @property
    def index_map(self) -> np.ndarray:
        return (self.a1 * self.a2) / (self.b1 * self.b2)


def _ssim_terms(a: np.ndarray, b: np.ndarray, data_range: float) -> _SsimTerms:
    n = SSIM_WINDOW * SSIM_WINDOW
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _window_sums(a) / n
    mu_b = _window_sums(b) / n
    var_a = _window_sums(a * a) / n - mu_a * mu_a
    var_b = _window_sums(b * b) / n - mu_b * mu_b
    cov = _window_sums(a * b) / n - mu_a * mu_b
    return _SsimTerms(
        mu_a=mu_a,
        mu_b=mu_b,
        a1=2.0 * mu_a * mu_b + c1,
        a2=2.0 * cov + c2,
        b1=mu_a * mu_a + mu_b * mu_b + c1,
        b2=var_a + var_b + c2,
    )


def ssim(a: Latent, b: Latent, data_range: Optional[float] = None) -> float:
    """
    Single-scale SSIM over valid 7x7 uniform windows with population statistics.
    Without an explicit data_range the joint range of both images is used.
    """
    check_same_shape(a, b, "SSIM inputs")
    _check_grid(a, SSIM_WINDOW, "SSIM")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if data_range is None:
        data_range = dynamic_range(np.stack([a, b]))
    return float(np.mean(_ssim_terms(a, b, data_range).index_map))


def ssim_gradient(a: Latent, b: Latent, data_range: float) -> Latent:
    """d SSIM(a, b) / d b with a and data_range held fixed"""
    check_same_shape(a, b, "SSIM inputs")
    _check_grid(a, SSIM_WINDOW, "SSIM")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    terms = _ssim_terms(a, b, data_range)
    index = terms.index_map
    scale = 2.0 / (SSIM_WINDOW * SSIM_WINDOW * terms.b1 * terms.b2)
    # per window: dS/db_j = p + q a_j + r b_j for every pixel j inside it
    p = scale * (terms.mu_a * (terms.a2 - terms.a1) - index * terms.mu_b * (terms.b2 - terms.b1))
    q = scale * terms.a1
    r = -scale * index * terms.b1
    kernel = np.ones((SSIM_WINDOW, SSIM_WINDOW))
    grad = (convolve2d(p, kernel, mode="full")
            + a * convolve2d(q, kernel, mode="full")
            + b * convolve2d(r, kernel, mode="full"))
    return grad / index.size


def scaled_window(height: int, width: int) -> int:
    """Background-PSNR window: 30 px at 512 px, scaled with the image side, odd, at least 5"""
    window = int(round(30.0 * min(height, width) / 512.0))
    if window % 2 == 0:
        window += 1
    return max(5, window)


def local_std(residual: Latent, window: int) -> np.ndarray:
    """Std of the residual over a window centered at each pixel, clamped to the image"""
    residual = np.asarray(residual, dtype=np.float64)
    size = 2 * (window // 2) + 1
    # windowed sums over the valid pixels only, divided by how many of them the window covers
    count = uniform_filter(np.ones_like(residual), size=size, mode="constant")
    mean = uniform_filter(residual, size=size, mode="constant") / count
    mean_sq = uniform_filter(residual ** 2, size=size, mode="constant") / count
    variance = mean_sq - mean ** 2
    # running window sums leave rounding residue where the residual is flat
    floor = np.finfo(np.float64).eps * residual.size * float(np.max(residual ** 2, initial=0.0))
    variance[variance <= floor] = 0.0
    return np.sqrt(variance)


@dataclass(frozen=True)
class BackgroundPsnr:
    value: MetricValue
    mask: np.ndarray
    peak: float
    threshold: float


def background_psnr(src: Latent, trg: Latent, window: Optional[int] = None,
                    threshold_mode: ThresholdMode = "mean",
                    peak: Optional[float] = None) -> BackgroundPsnr:
    """
    PSNR restricted to pixels whose windowed residual std is at most the
    mean (or median) of all windowed stds.
    """
    check_same_shape(src, trg, "background PSNR inputs")
    if np.ndim(src) != 2:
        raise ShapeError(f"Background PSNR needs grid latents, got shape {np.shape(src)}")
    height, width = np.shape(src)
    if window is None:
        window = scaled_window(height, width)
    if window <= 0 or window % 2 == 0:
        raise DomainError(f"Window must be a positive odd integer, got {window}")
    if window > min(height, width):
        raise DomainError(f"Window {window} exceeds the image side {min(height, width)}")
    if threshold_mode not in ("mean", "median"):
        raise DomainError(f"Unknown threshold mode: {threshold_mode}")
    if peak is None:
        span = float(np.max(src) - np.min(src))
        if span <= 0:
            logger.warning("Constant source image; background PSNR falls back to peak 1.0")
        peak = dynamic_range(src)

    src = np.asarray(src, dtype=np.float64)
    trg = np.asarray(trg, dtype=np.float64)
    residual = trg - src
    sigma = local_std(residual, window)
    threshold = float(np.mean(sigma) if threshold_mode == "mean" else np.median(sigma))
    mask = sigma <= threshold
    if not mask.any():
        logger.warning("Background mask is empty; background PSNR undefined")
        return BackgroundPsnr(Sentinel.UNDEFINED, mask, peak, threshold)
    err = float(np.mean(residual[mask] ** 2))
    return BackgroundPsnr(psnr_from_mse(err, peak), mask, peak, threshold)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a and b| / |a or b|; two empty masks count as identical"""
    check_same_shape(a, b, "masks")
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def threshold_mask(image: Latent, level: float = 0.5) -> np.ndarray:
    """Object mask of a grid image by intensity thresholding"""
    return np.asarray(image) > level


def centroid(image: Latent) -> Tuple[float, float]:
    """Intensity-weighted center (row, col) with pixel centers at i + 0.5"""
    weights = np.clip(np.asarray(image, dtype=np.float64), 0.0, None)
    total = float(weights.sum())
    if total <= 0:
        raise DomainError("Centroid undefined for an image with no positive mass")
    rows = np.arange(weights.shape[0]) + 0.5
    cols = np.arange(weights.shape[1]) + 0.5
    return (float(rows @ weights.sum(axis=1)) / total, float(cols @ weights.sum(axis=0)) / total)


def identity_residual(z: Latent, mu_cond: Latent, z_src: Latent, mu_src: Latent) -> float:
    """||(z - mu_cond) - (z_src - mu_src)||"""
    check_same_shape(z, mu_cond, "z and mu_cond")
    check_same_shape(z_src, mu_src, "z_src and mu_src")
    check_same_shape(z, z_src, "z and z_src")
    offset = (np.asarray(z) - np.asarray(mu_cond)) - (np.asarray(z_src) - np.asarray(mu_src))
    return float(np.linalg.norm(offset))
