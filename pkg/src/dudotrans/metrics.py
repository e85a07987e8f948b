"""Image quality metrics: PSNR, RMSE and multi-scale SSIM."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["MetricConfig", "psnr", "rmse", "ms_ssim", "feasible_levels", "PSNR_CAP"]

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclasses.dataclass(frozen=True)
class MetricConfig:
    data_range: float = 1.0
    ssim_levels: int = 5
    ssim_kernel: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.data_range <= 0:
            raise ValueError("data_range must be positive")
        if not 1 <= self.ssim_levels <= 5:
            raise ValueError("ssim_levels must be in 1..5")
        if self.ssim_kernel < 1 or self.ssim_kernel % 2 == 0:
            raise ValueError("ssim_kernel must be odd")
        if self.ssim_sigma <= 0:
            raise ValueError("ssim_sigma must be positive")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    b = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(pred, gt) -> float:
    a, b = _pair(pred, gt)
    return math.sqrt(float(np.mean((a - b) ** 2)))


def psnr(pred, gt, cfg: MetricConfig = MetricConfig()) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report ``PSNR_CAP``."""
    a, b = _pair(pred, gt)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(cfg.data_range ** 2 / err)


def _gaussian(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def _ssim_terms(a, b, g, c1, c2) -> tuple[float, float]:
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2.0 * sab + c2) / (saa + sbb + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    # odd sizes: pad with edge values so every output pixel averages four samples
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
        h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def feasible_levels(shape, cfg: MetricConfig = MetricConfig()) -> int:
    """Largest level count <= ``cfg.ssim_levels`` with ``min(H, W) >= kernel * 2**(L-1)``."""
    side = min(shape)
    levels = cfg.ssim_levels
    while levels >= 1 and side < cfg.ssim_kernel * 2 ** (levels - 1):
        levels -= 1
    return levels


def ms_ssim(pred, gt, cfg: MetricConfig = MetricConfig(), return_levels: bool = False):
    """Multi-scale SSIM with a Gaussian window and 2x2 mean pooling between scales.

    Levels are reduced when the image is too small for the configured count; the
    standard scale weights are then truncated and renormalized. With
    ``return_levels=True`` the result is ``(value, levels_used)``.
    """
    a, b = _pair(pred, gt)
    if a.ndim != 2:
        raise ValueError(f"ms_ssim expects 2-d images, got {a.shape}")
    levels = feasible_levels(a.shape, cfg)
    if levels < 1:
        raise ValueError(
            f"image {a.shape} smaller than the {cfg.ssim_kernel}-tap SSIM window"
        )
    weights = np.asarray(MS_SSIM_WEIGHTS[:levels])
    weights = weights / weights.sum()
    g = _gaussian(cfg.ssim_kernel, cfg.ssim_sigma)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    value = 1.0
    for lvl in range(levels):
        ssim_val, cs = _ssim_terms(a, b, g, c1, c2)
        term = ssim_val if lvl == levels - 1 else cs
        value *= max(term, 0.0) ** weights[lvl]
        if lvl < levels - 1:
            a, b = _pool2(a), _pool2(b)
    return (value, levels) if return_levels else value
