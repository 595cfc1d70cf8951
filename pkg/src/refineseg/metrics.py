"""Mask quality metrics: IoU, boundary IoU, contour F-measure and J&F."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

BAND_RATIO = 0.02
CONTOUR_RATIO = 0.008


def as_binary(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        mask = np.squeeze(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {np.shape(mask)}")
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask values must be 0 or 1")
        mask = mask.astype(bool)
    return mask


def _pair(a, b):
    a, b = as_binary(a), as_binary(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _ratio(inter: int, union: int) -> float:
    return 1.0 if union == 0 else inter / union


def iou(a, b) -> float:
    a, b = _pair(a, b)
    return _ratio(int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b)))


def boundary(mask) -> np.ndarray:
    """Foreground pixels 4-adjacent to background or to the canvas edge."""
    mask = as_binary(mask)
    cross = ndimage.generate_binary_structure(2, 1)
    eroded = ndimage.binary_erosion(mask, structure=cross, border_value=0)
    return mask & ~eroded


def band(mask, d: int) -> np.ndarray:
    """Pixels within Chebyshev distance ``d`` of the mask boundary."""
    edge = boundary(mask)
    if not edge.any():
        return edge
    return ndimage.maximum_filter(edge, size=2 * d + 1, mode="constant", cval=0)


def boundary_iou(a, b, d: int) -> float:
    if d < 1:
        raise ValueError("band width d must be >= 1")
    a, b = _pair(a, b)
    ra = a & band(a, d)
    rb = b & band(b, d)
    return _ratio(int(np.count_nonzero(ra & rb)), int(np.count_nonzero(ra | rb)))


def diagonal(shape) -> float:
    return math.hypot(shape[0], shape[1])


def band_width(shape, ratio: float = BAND_RATIO) -> int:
    return max(1, round(ratio * diagonal(shape)))


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return xx * xx + yy * yy <= radius * radius


def contour_f(pred, gt, tau: int | None = None) -> float:
    """Boundary F-measure: boundary pixels count as matched when within Euclidean
    distance ``tau`` of the other mask's boundary."""
    pred, gt = _pair(pred, gt)
    if tau is None:
        tau = band_width(pred.shape, CONTOUR_RATIO)
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    disk = _disk(tau)
    gt_dil = ndimage.binary_dilation(bg, structure=disk)
    pred_dil = ndimage.binary_dilation(bp, structure=disk)
    precision = np.count_nonzero(bp & gt_dil) / n_p
    recall = np.count_nonzero(bg & pred_dil) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def miou_mbiou(pred_set, gt_set):
    """Mean IoU and mean boundary IoU (band = 2% of the diagonal, at least 1 px)."""
    pred_set, gt_set = list(pred_set), list(gt_set)
    if len(pred_set) != len(gt_set):
        raise ValueError("prediction and ground-truth sets differ in length")
    if not pred_set:
        raise ValueError("empty evaluation set")
    ious, bious = [], []
    for p, g in zip(pred_set, gt_set):
        p, g = _pair(p, g)
        ious.append(iou(p, g))
        bious.append(boundary_iou(p, g, band_width(g.shape)))
    return float(np.mean(ious)), float(np.mean(bious))


def jf_score(pred_frames, gt_frames, tau: int | None = None):
    """(J, F, J&F) for one sequence: mean per-frame IoU, mean contour F, their average."""
    pred_frames, gt_frames = list(pred_frames), list(gt_frames)
    if len(pred_frames) != len(gt_frames):
        raise ValueError(f"{len(pred_frames)} predicted frames vs {len(gt_frames)} ground-truth frames")
    if not pred_frames:
        raise ValueError("empty sequence")
    j = float(np.mean([iou(p, g) for p, g in zip(pred_frames, gt_frames)]))
    f = float(np.mean([contour_f(p, g, tau) for p, g in zip(pred_frames, gt_frames)]))
    return j, f, (j + f) / 2
