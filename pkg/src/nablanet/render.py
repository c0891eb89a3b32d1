"""Mask contours and colour overlays."""

from __future__ import annotations

import numpy as np

GT_COLOR = (0, 255, 0)
PRED_COLOR = (0, 0, 255)


def contour(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the foreground.

    Pixels beyond the image border count as background.
    """
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def overlay(image: np.ndarray, pred_mask: np.ndarray, gt_mask=None) -> np.ndarray:
    """RGB copy of ``image`` with the GT contour in green and the prediction in blue on top."""
    out = np.array(image, dtype=np.uint8, copy=True)
    if out.ndim == 2:
        out = np.repeat(out[:, :, None], 3, axis=2)
    if gt_mask is not None:
        out[contour(gt_mask)] = GT_COLOR
    out[contour(pred_mask)] = PRED_COLOR
    return out
