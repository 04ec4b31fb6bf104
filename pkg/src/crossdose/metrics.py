"""PSNR, SSIM and RMSE used by the benchmark tables and the training loss.

SSIM follows the classic local-window form

    ssim(a, b) = (2*mu_a*mu_b + c1) * (2*cov_ab + c2)
                 / ((mu_a^2 + mu_b^2 + c1) * (var_a + var_b + c2))

with c1 = (k1*L)^2, c2 = (k2*L)^2 and an 11x11 window, averaged over all
fully-interior window positions (valid-region convolution, no padding) so no
synthetic border values enter the mean.  Local moments are population moments
(divide by the window pixel count).  The dynamic range L is one constant for
a whole experiment (the SUV clip ceiling), identical across methods and doses,
so metric differences reflect estimates rather than per-image ranges.

This module is pure numpy/scipy in double precision; the differentiable twin
in ``crossdose.loss`` is implemented independently in torch, and the two are
cross-checked against each other in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ValidationError


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 16.0  # L, in SUV
    gaussian: bool = False       # uniform window by default; Gaussian for cross-checks
    gaussian_sigma: float = 1.5

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValidationError(f"window size {self.window_size} must be odd and positive")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValidationError("k1, k2 and dynamic_range must be positive")


def ssim_window(p: SsimParams) -> np.ndarray:
    """Normalized window weights (float64, sums to 1)."""
    k = p.window_size
    if not p.gaussian:
        return np.full((k, k), 1.0 / (k * k))
    ax = np.arange(k) - (k - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * p.gaussian_sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValidationError(f"expected 2-D images, got shape {a.shape}")
    return a, b


def rmse(a, b) -> float:
    """Root mean squared error in SUV; symmetric in its arguments."""
    a, b = _check_pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(ref, est, dynamic_range: float) -> float:
    """20*log10(L / rmse) in dB; +inf when the images are identical."""
    if dynamic_range <= 0:
        raise ValidationError("dynamic_range must be positive")
    err = rmse(ref, est)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(dynamic_range / err)


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """Mean local SSIM index over all valid window positions."""
    a, b = _check_pair(a, b)
    k = params.window_size
    if a.shape[0] < k or a.shape[1] < k:
        raise ValidationError(f"image {a.shape} smaller than the {k}x{k} window")
    w = ssim_window(params)
    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    mu_aa = convolve2d(a * a, w, mode="valid")
    mu_bb = convolve2d(b * b, w, mode="valid")
    mu_ab = convolve2d(a * b, w, mode="valid")
    var_a = mu_aa - mu_a**2
    var_b = mu_bb - mu_b**2
    cov = mu_ab - mu_a * mu_b
    L = params.dynamic_range
    c1 = (params.k1 * L) ** 2
    c2 = (params.k2 * L) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricsRecord:
    subject_id: str
    dose_fraction: float
    method: str
    psnr: float
    ssim: float
    rmse: float

    def __post_init__(self):
        if self.rmse < 0:
            raise ValidationError("rmse cannot be negative")
        if not -1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9:
            raise ValidationError(f"ssim {self.ssim} outside [-1, 1]")


def score_pair(ref, est, subject_id: str, dose: float, method: str,
               params: SsimParams) -> MetricsRecord:
    return MetricsRecord(
        subject_id=subject_id,
        dose_fraction=dose,
        method=method,
        psnr=psnr(ref, est, params.dynamic_range),
        ssim=ssim(ref, est, params),
        rmse=rmse(ref, est),
    )
