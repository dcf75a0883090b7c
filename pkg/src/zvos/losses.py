"""Training losses: binary cross entropy and the L1 + SSIM combination."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, absolute, add, clamp, log, mul, sub
from .errors import DimensionError
from .ops import conv2d

BCE_EPS = 1e-7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy; predictions are clamped away from {0, 1}."""
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"bce_loss: shapes {pred.data.shape} and {target.data.shape} differ")
    p = clamp(pred, BCE_EPS, 1.0 - BCE_EPS)
    ll = add(mul(target, log(p)), mul(1.0 - target, log(1.0 - p)))
    return -ll.mean()


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    """Normalized 2-D Gaussian window (outer product of a 1-D profile)."""
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_window_size(h: int, w: int) -> int:
    """Window side 11, shrunk to the largest odd size fitting the image."""
    side = min(11, h, w)
    return side if side % 2 == 1 else side - 1


def ssim(pred: Tensor, gt: Tensor, sigma: float = 1.5) -> Tensor:
    """Mean structural similarity over fully supported Gaussian windows.

    Inputs are (B, 1, H, W) maps on unit dynamic range. Windows are applied
    without padding so each statistic covers a complete window.
    """
    if pred.data.shape != gt.data.shape:
        raise DimensionError(f"ssim: shapes {pred.data.shape} and {gt.data.shape} differ")
    if pred.data.ndim != 4 or pred.data.shape[1] != 1:
        raise DimensionError(f"ssim: expected (B, 1, H, W) maps, got {pred.data.shape}")
    _, _, h, w = pred.data.shape
    side = ssim_window_size(h, w)
    window = Tensor(gaussian_window(side, sigma)[None, None])
    zero_bias = Tensor(np.zeros(1))

    def windowed(t: Tensor) -> Tensor:
        return conv2d(t, window, zero_bias)

    mu_p = windowed(pred)
    mu_g = windowed(gt)
    var_p = sub(windowed(mul(pred, pred)), mul(mu_p, mu_p))
    var_g = sub(windowed(mul(gt, gt)), mul(mu_g, mu_g))
    cov = sub(windowed(mul(pred, gt)), mul(mu_p, mu_g))
    num = mul(2.0 * mul(mu_p, mu_g) + SSIM_C1, 2.0 * cov + SSIM_C2)
    den = mul(mul(mu_p, mu_p) + mul(mu_g, mu_g) + SSIM_C1, var_p + var_g + SSIM_C2)
    return (num / den).mean()


def l1_ssim_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """mean|pred - gt| + (1 - SSIM(pred, gt))."""
    if pred.data.shape != gt.data.shape:
        raise DimensionError(
            f"l1_ssim_loss: shapes {pred.data.shape} and {gt.data.shape} differ")
    return absolute(sub(pred, gt)).mean() + (1.0 - ssim(pred, gt))
