"""Image-quality and overlap metrics: MSE, PSNR, SSIM, intensity-based
tissue/CSF segmentation, Dice, and class areas.

Images are (H, W, C) or (H, W) float arrays in [0, 1] with dynamic range 1.
Multi-channel metrics are computed per channel and averaged. Segmentation
masks use the integer labels of :class:`SegLabel`.
"""

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.signal import correlate2d

# Standard SSIM formulation: 11x11 Gaussian window, sigma 1.5, K1/K2 as below.
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

BACKGROUND_THRESHOLD = 0.02
KMEANS_ITERS = 50


class SegLabel(IntEnum):
    BACKGROUND = 0
    TISSUE = 1
    CSF = 2


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    """Mean squared difference over all pixels and channels."""
    a, b = _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_channel(x, y, win, c1, c2):
    # Valid-mode windows only, so every statistic uses a full 11x11 support.
    mu_x = correlate2d(x, win, mode="valid")
    mu_y = correlate2d(y, win, mode="valid")
    var_x = correlate2d(x * x, win, mode="valid") - mu_x ** 2
    var_y = correlate2d(y * y, win, mode="valid") - mu_y ** 2
    cov = correlate2d(x * y, win, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean structural similarity over all valid window positions and channels."""
    a, b = _check_shapes(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    values = [np.mean(_ssim_channel(a[:, :, c], b[:, :, c], win, c1, c2))
              for c in range(a.shape[2])]
    return float(np.mean(values))


def segment(img) -> np.ndarray:
    """Threshold + 1-D 2-means segmentation into background/tissue/CSF.

    Background: T1-like channel < BACKGROUND_THRESHOLD. The remaining pixels
    are clustered on T1-like intensity with 2-means initialized at the
    25th/75th foreground percentiles and a fixed 50 iterations; the lower
    centroid becomes CSF, the higher tissue. Fully deterministic.
    """
    img = np.asarray(img, dtype=np.float64)
    t1 = img[:, :, 0] if img.ndim == 3 else img
    fg = t1 >= BACKGROUND_THRESHOLD
    if not fg.any():
        raise ValueError("no foreground pixels above the background threshold")
    values = t1[fg]
    c_lo, c_hi = np.percentile(values, [25.0, 75.0])
    for _ in range(KMEANS_ITERS):
        hi_side = np.abs(values - c_hi) <= np.abs(values - c_lo)
        if hi_side.any():
            c_hi = values[hi_side].mean()
        if (~hi_side).any():
            c_lo = values[~hi_side].mean()
    mask = np.zeros(t1.shape, dtype=np.uint8)
    hi_side = np.abs(t1 - c_hi) <= np.abs(t1 - c_lo)
    mask[fg & hi_side] = SegLabel.TISSUE
    mask[fg & ~hi_side] = SegLabel.CSF
    return mask


def dice(a, b, label) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|) for one label; empty-vs-empty is 1.0."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    in_a = a == int(label)
    in_b = b == int(label)
    total = int(in_a.sum()) + int(in_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((in_a & in_b).sum()) / total


def class_area(mask, label) -> int:
    """Pixel count of one label (2-D stand-in for a volume)."""
    return int((np.asarray(mask) == int(label)).sum())


@dataclass
class PairMetrics:
    """Prediction-vs-reference metrics for one image pair."""

    mse: float
    psnr: float
    ssim: float
    dice_tissue: float
    dice_csf: float
    pred_area_tissue: int
    pred_area_csf: int
    pred_area_background: int
    ref_area_tissue: int
    ref_area_csf: int
    ref_area_background: int


def compare_images(pred, ref) -> PairMetrics:
    """All image-quality and overlap metrics for one prediction/reference pair."""
    pred_mask = segment(pred)
    ref_mask = segment(ref)
    return PairMetrics(
        mse=mse(pred, ref),
        psnr=psnr(pred, ref),
        ssim=ssim(pred, ref),
        dice_tissue=dice(pred_mask, ref_mask, SegLabel.TISSUE),
        dice_csf=dice(pred_mask, ref_mask, SegLabel.CSF),
        pred_area_tissue=class_area(pred_mask, SegLabel.TISSUE),
        pred_area_csf=class_area(pred_mask, SegLabel.CSF),
        pred_area_background=class_area(pred_mask, SegLabel.BACKGROUND),
        ref_area_tissue=class_area(ref_mask, SegLabel.TISSUE),
        ref_area_csf=class_area(ref_mask, SegLabel.CSF),
        ref_area_background=class_area(ref_mask, SegLabel.BACKGROUND),
    )


def aggregate(rows) -> dict:
    """Mean/SD per metric over a list of PairMetrics.

    PSNR aggregates over finite entries only (identical pairs give +inf).
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no metric rows to aggregate")
    out = {"n": len(rows)}
    for field in ("mse", "psnr", "ssim", "dice_tissue", "dice_csf",
                  "pred_area_tissue", "pred_area_csf",
                  "ref_area_tissue", "ref_area_csf"):
        vals = np.array([getattr(r, field) for r in rows], dtype=np.float64)
        if field == "psnr":
            vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            out[f"{field}_mean"] = math.inf
            out[f"{field}_sd"] = 0.0
        else:
            out[f"{field}_mean"] = float(vals.mean())
            out[f"{field}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return out
