"""MAE, PSNR and SSIM image-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _check_shapes(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def mae(x, ref) -> float:
    x, ref = _check_shapes(x, ref)
    return float(np.mean(np.abs(x - ref)))


def psnr(x, ref, literal: bool = False) -> float:
    """Peak signal-to-noise ratio of ``x`` against the reference ``ref`` in dB.

    The peak is ``max(ref)``. By default the error is the RMSE; ``literal=True``
    uses the plain Euclidean norm of the error instead, which lowers the value
    by ``10 log10(N)``. Identical images give ``inf``.
    """
    x, ref = _check_shapes(x, ref)
    peak = ref.max()
    if peak <= 0:
        raise ValueError("PSNR needs a reference with positive maximum")
    err = np.linalg.norm(x - ref)
    if not literal:
        err /= np.sqrt(x.size)
    if err == 0:
        return float("inf")
    return float(20.0 * np.log10(peak / err))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, ref, window_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully contained Gaussian windows.

    The stabilizing constants use the dynamic range of ``ref``. The raw mean is
    returned, so strongly anticorrelated images can score below zero.
    """
    x, ref = _check_shapes(x, ref)
    if x.ndim != 2 or min(x.shape) < window_size:
        raise ValueError(f"SSIM needs 2-D images of at least {window_size}x{window_size}")
    drange = ref.max() - ref.min()
    if drange > 0:
        # every window term scales by drange^4, so work in units of the range
        # to keep the constants clear of underflow and overflow
        x, ref = x / drange, ref / drange
        drange = 1.0
    c1 = (k1 * drange) ** 2
    c2 = (k2 * drange) ** 2
    w = gaussian_window(window_size, sigma)

    def filt(a):
        return np.tensordot(sliding_window_view(a, w.shape), w, axes=2)

    mu_x, mu_r = filt(x), filt(ref)
    var_x = filt(x * x) - mu_x**2
    var_r = filt(ref * ref) - mu_r**2
    cov = filt(x * ref) - mu_x * mu_r
    num = (2 * mu_x * mu_r + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_r**2 + c1) * (var_x + var_r + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricReport:
    mae: float
    psnr: float
    ssim: float

    def as_row(self) -> dict:
        return {"mae": self.mae, "psnr": self.psnr, "ssim": self.ssim}


def evaluate(x, ref) -> MetricReport:
    return MetricReport(mae(x, ref), psnr(x, ref), ssim(x, ref))
