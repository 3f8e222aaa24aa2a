"""Landmark response maps: rendering, masked loss and peak decoding.

Heatmap pixel ``(i, j)`` corresponds to crop coordinate ``(stride*j, stride*i)``.
"""
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T

STRIDE = 4


class EmptyMaskWarning(UserWarning):
    pass


def render_heatmaps(points, mask, height, width, sigma=1.0, stride=STRIDE):
    """Gaussian response per selected landmark, peak scaled to exactly 1.

    ``points`` are crop coordinates (N,2).  Returns ``(maps, mask)`` where the
    mask has out-of-bounds landmarks dropped; their channels are zero.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2) / stride
    mask = np.asarray(mask, dtype=bool).copy() if mask is not None else np.ones(len(pts), dtype=bool)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] <= width - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= height - 1)
    mask &= inside & np.all(np.isfinite(pts), axis=1)
    maps = np.zeros((len(pts), height, width))
    if not mask.any():
        return maps, mask
    x = pts[mask, 0][:, None]
    y = pts[mask, 1][:, None]
    jj = np.arange(width)[None, :]
    ii = np.arange(height)[None, :]
    inv = 1.0 / (2.0 * sigma * sigma)
    # separable; subtracting the nearest-grid exponent pins the peak to 1.0
    ex = -((jj - x) ** 2) * inv
    ey = -((ii - y) ** 2) * inv
    ex -= ex.max(axis=1, keepdims=True)
    ey -= ey.max(axis=1, keepdims=True)
    maps[mask] = np.exp(ey[:, :, None] + ex[:, None, :])
    return maps, mask


def masked_mse_loss(pred, gt, mask):
    """Squared response-map error averaged over the selected channels.

    ``pred`` is a tensor (B,N,H,W) or (N,H,W); ``gt`` the matching array and
    ``mask`` (B,N) or (N,) booleans.  Per sample the pixel sums of selected
    channels are divided by the number of selected channels; samples are
    then averaged.  Unselected channels get an exact zero gradient.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    mask = np.asarray(mask, dtype=bool)
    if pred.ndim == 3:
        mask = mask[None]
    batch = mask.shape[0]
    nsel = mask.sum(axis=1)
    if np.any(nsel == 0):
        warnings.warn("sample with no selected response maps contributes zero loss", EmptyMaskWarning, stacklevel=2)
    weights = np.where(mask, 1.0 / np.maximum(nsel, 1)[:, None], 0.0) / batch
    if pred.ndim == 3:
        weights = weights[0]
    return T.masked_square_error(pred, gt, weights)


@dataclass
class Peaks:
    points: np.ndarray
    mask: np.ndarray
    low_confidence: np.ndarray


def _quarter(lo, mid, hi):
    # quarter-pixel step toward the larger neighbour
    return 0.25 * np.sign(hi - lo)


def _vertex(lo, mid, hi):
    """Offset from ``mid`` of the parabola vertex through three log values, or None."""
    if min(lo, mid, hi) <= 0:
        return None
    a, b, c = np.log(lo), np.log(mid), np.log(hi)
    den = a - 2 * b + c
    if den >= 0:
        return None
    return 0.5 * (a - c) / den


def _parabola(lo, mid, hi):
    # vertex of the parabola through the log values; exact for a Gaussian peak
    v = _vertex(lo, mid, hi)
    if v is None:
        return _quarter(lo, mid, hi)
    return float(np.clip(v, -0.5, 0.5))


def _parabola_edge(line, i):
    """Border peak at ``line[i]``: the same fit through the peak and its two inward neighbours."""
    if len(line) < 3:
        return 0.0
    d = 1 if i == 0 else -1
    v = _vertex(line[i + 2 * d], line[i + d], line[i])
    if v is None:
        return 0.0
    # vertex measured from the middle sample, which sits one step inward
    return float(np.clip(d * (1.0 - v), -0.5, 0.5))


REFINERS = {"quarter": _quarter, "parabola": _parabola}


def decode_peaks(maps, mask=None, crop_to_image=None, stride=STRIDE, refine="quarter"):
    """Argmax per selected channel plus a sub-pixel refinement.

    ``refine="quarter"`` shifts a quarter pixel toward the larger neighbour
    on each axis; ``"parabola"`` fits a parabola to the log responses of the
    peak and its two neighbours (the two inward neighbours on a border).
    The quarter step leaves border peaks unrefined along the axis that
    touches the border.  Ties in the argmax go to the first pixel
    in row-major order.  Flat channels are flagged low-confidence and
    dropped from the mask.  Points are scaled to crop coordinates and, when
    ``crop_to_image`` is given, mapped through it.
    """
    step = REFINERS[refine]
    edge = _parabola_edge if refine == "parabola" else (lambda line, i: 0.0)
    maps = np.asarray(maps, dtype=np.float64)
    n, h, w = maps.shape
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    flat = maps.reshape(n, -1)
    low = flat.max(axis=1) == flat.min(axis=1)
    mask &= ~low
    arg = flat.argmax(axis=1)
    pts = np.zeros((n, 2))
    for k in np.flatnonzero(mask):
        i, j = divmod(int(arg[k]), w)
        m = maps[k]
        dx = step(m[i, j - 1], m[i, j], m[i, j + 1]) if 0 < j < w - 1 else edge(m[i], j)
        dy = step(m[i - 1, j], m[i, j], m[i + 1, j]) if 0 < i < h - 1 else edge(m[:, j], i)
        pts[k] = (j + dx, i + dy)
    pts *= stride
    if crop_to_image is not None:
        pts[mask] = crop_to_image.apply(pts[mask])
    return Peaks(pts, mask, low)


def peak_confidence(maps):
    maps = np.asarray(maps, dtype=np.float64)
    return np.clip(maps.reshape(maps.shape[0], -1).max(axis=1), 0.0, 1.0)
