"""PNG rendering of images, difference overlays, and contact sheets.

Difference overlays follow the red-positive / blue-negative convention with
the display threshold zeroing small values; the raw difference data is never
modified.
"""

import numpy as np
from PIL import Image

from .counterfactual import apply_display_threshold

CELL_SCALE = 4     # nearest-neighbour upscale for contact sheets
PAD = 2


def to_gray_u8(img: np.ndarray) -> np.ndarray:
    """T1-like channel (or single channel) as uint8 grayscale."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return (np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8)


def diff_overlay_rgb(base: np.ndarray, diff: np.ndarray,
                     threshold: float) -> np.ndarray:
    """Grayscale base with red (positive) / blue (negative) diff overlay."""
    gray = to_gray_u8(base).astype(np.float64)
    rgb = np.stack([gray, gray, gray], axis=-1)
    d = apply_display_threshold(diff, threshold)
    if d.ndim == 3:
        d = d.mean(axis=2)
    strength = np.clip(np.abs(d) / 0.25, 0.0, 1.0)
    pos = d > 0
    neg = d < 0
    for mask, channel in ((pos, 0), (neg, 2)):
        blend = strength[mask][:, None]
        color = np.zeros((int(mask.sum()), 3))
        color[:, channel] = 255.0
        rgb[mask] = (1 - blend) * rgb[mask] + blend * color
    return rgb.round().astype(np.uint8)


def _upscale(rgb: np.ndarray, scale: int = CELL_SCALE) -> np.ndarray:
    return np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)


def _sheet(cells, n_cols: int) -> Image.Image:
    """Tile equally sized RGB cells row-major with padding."""
    cells = [np.atleast_3d(c) for c in cells]
    h, w = cells[0].shape[:2]
    n_rows = (len(cells) + n_cols - 1) // n_cols
    canvas = np.full((n_rows * (h + PAD) + PAD, n_cols * (w + PAD) + PAD, 3),
                     32, dtype=np.uint8)
    for idx, cell in enumerate(cells):
        r, c = divmod(idx, n_cols)
        y = PAD + r * (h + PAD)
        x = PAD + c * (w + PAD)
        canvas[y:y + h, x:x + w] = cell
    return Image.fromarray(canvas)


def grid_sheet(grid) -> Image.Image:
    """3x3 counterfactual panel: each cell overlays its diff vs the reference."""
    cells = []
    for img, diff in zip(grid.images, grid.diffs):
        cells.append(_upscale(diff_overlay_rgb(img, diff, grid.display_threshold)))
    return _sheet(cells, n_cols=len(grid.dose_axis))


def series_sheet(series) -> Image.Image:
    """Top row: predictions per day. Bottom row: consecutive diff overlays."""
    top = [_upscale(np.stack([to_gray_u8(im)] * 3, axis=-1))
           for im in series.images]
    bottom = [np.zeros_like(top[0])]
    for img, diff in zip(series.images[1:], series.diffs):
        bottom.append(_upscale(diff_overlay_rgb(img, diff, series.display_threshold)))
    return _sheet(top + bottom, n_cols=len(series.images))


def save_png(img: np.ndarray, path) -> None:
    gray = to_gray_u8(img)
    Image.fromarray(gray, mode="L").save(path)
