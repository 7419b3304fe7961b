"""Localisation and counterfactual-quality metrics.

IoU / Dice score binary masks; NCC compares signed float maps; the
non-resemblance score and masked SSIM compare an input with its generated
counterfactual instance.
"""

from __future__ import annotations

from typing import Union

import numpy as np
from scipy.signal import correlate2d

from .core import BinaryMask, ContractError, Image, MetricError, RangeTag

ArrayLike = Union[np.ndarray, Image, BinaryMask]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if hasattr(x, "data") else x)


def _pair(a, b, as_bool: bool = False) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if as_bool:
        return a.astype(bool), b.astype(bool)
    return a.astype(np.float64), b.astype(np.float64)


def iou(a, b) -> float:
    """Intersection over union; two empty masks score 1."""
    a, b = _pair(a, b, as_bool=True)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dice(a, b) -> float:
    a, b = _pair(a, b, as_bool=True)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def ncc(a, b) -> float:
    """Mean product of the two standardised grids (population std)."""
    a, b = _pair(a, b)
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0 or not (np.isfinite(sa) and np.isfinite(sb)):
        raise MetricError("NCC undefined for a zero-variance grid")
    r = float(np.mean((a - a.mean()) / sa * ((b - b.mean()) / sb)))
    return float(np.clip(r, -1.0, 1.0))


def _storage01(x) -> np.ndarray:
    if isinstance(x, Image) and x.range_tag is RangeTag.MODEL11:
        return (np.asarray(x.data, dtype=np.float64) + 1.0) / 2.0
    return _arr(x).astype(np.float64)


def non_resemblance(x_pos, ci, gt, mode: str = "absolute") -> tuple[float, float, float]:
    """Region-wise dissimilarity between an input and its counterfactual instance.

    Returns ``(lesion, normal, total)`` with ``total = (lesion + normal) / 2``.

    ``mode="absolute"`` scores each region by its mean |ci - x_pos|;
    ``mode="literal"`` uses 1 - mean(ci - x_pos). Differences are taken in
    the [0, 1] storage range; model11 Images are converted first.
    """
    x, y = _storage01(x_pos), _storage01(ci)
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch: {x.shape} vs {y.shape}")
    m = _arr(gt).astype(bool)
    if m.shape != x.shape:
        raise ContractError(f"mask shape {m.shape} != image shape {x.shape}")
    if not m.any() or m.all():
        raise MetricError("non-resemblance needs a ground truth with both lesion and normal pixels")
    d = y - x
    if mode == "absolute":
        lesion, normal = float(np.abs(d[m]).mean()), float(np.abs(d[~m]).mean())
    elif mode == "literal":
        lesion, normal = 1.0 - float(d[m].mean()), 1.0 - float(d[~m].mean())
    else:
        raise ContractError(f"unknown non-resemblance mode {mode!r}")
    return lesion, normal, (lesion + normal) / 2.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully-contained Gaussian window ('valid' filtering)."""
    a, b = _pair(a, b)
    if min(a.shape) < window:
        raise MetricError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)

    def filt(x):
        return correlate2d(x, w, mode="valid")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, **kw) -> float:
    return float(np.mean(ssim_map(_storage01(a), _storage01(b), **kw)))


def masked_ssim(x_pos, ci, gt, **kw) -> float:
    """SSIM after zeroing the ground-truth lesion pixels in both images."""
    x, y = _storage01(x_pos), _storage01(ci)
    m = _arr(gt).astype(bool)
    if m.shape != x.shape or y.shape != x.shape:
        raise ContractError("masked_ssim inputs must share one shape")
    return ssim(np.where(m, 0.0, x), np.where(m, 0.0, y), **kw)
