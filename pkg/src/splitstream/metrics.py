"""Reconstruction scoring: PSNR and windowed SSIM on 0..255 pixel values.

Lower scores against the private ground truth mean a defense worked.
SSIM uses flat 8x8 windows with stride 4 and the conventional stabilizers
C1=(0.01*255)^2, C2=(0.03*255)^2, C3=C2/2, multiplying the luminance,
contrast, and structure terms per window and averaging over windows and
channels.
"""

from __future__ import annotations

import math

import numpy as np

PEAK = 255.0
C1 = (0.01 * PEAK) ** 2
C2 = (0.03 * PEAK) ** 2
C3 = C2 / 2.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(255^2 / MSE); identical images return +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    err = np.mean((a - b) ** 2)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / err)


def _windows(x: np.ndarray, win: int, stride: int):
    h, w = x.shape
    for i in range(0, h - win + 1, stride):
        for j in range(0, w - win + 1, stride):
            yield x[i : i + win, j : j + win]


def _ssim_window(wa: np.ndarray, wb: np.ndarray) -> float:
    mu_a = wa.mean()
    mu_b = wb.mean()
    var_a = wa.var()
    var_b = wb.var()
    cov = ((wa - mu_a) * (wb - mu_b)).mean()
    sd_a = math.sqrt(var_a)
    sd_b = math.sqrt(var_b)
    lum = (2 * mu_a * mu_b + C1) / (mu_a**2 + mu_b**2 + C1)
    con = (2 * sd_a * sd_b + C2) / (var_a + var_b + C2)
    struct = (cov + C3) / (sd_a * sd_b + C3)
    return lum * con * struct


def ssim(a: np.ndarray, b: np.ndarray, win: int = 8, stride: int = 4) -> float:
    """Mean local SSIM over channels and sliding windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ValueError(f"ssim: expected (C,H,W) or (H,W), got {a.shape}")
    if a.shape[-1] < win or a.shape[-2] < win:
        raise ValueError(f"ssim: image {a.shape} smaller than window {win}")
    vals = [
        _ssim_window(wa, wb)
        for ca, cb in zip(a, b)
        for wa, wb in zip(_windows(ca, win, stride), _windows(cb, win, stride))
    ]
    return float(np.mean(vals))
