"""Elementary grid operations shared by the whole pipeline.

All functions are pure and operate on 2-D float64 maps, bool masks or int32
instance label maps (0 = background, labels 1..K contiguous).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

# Correlation kernels; gx responds to increase along columns, gy along rows.
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def sobel_gradients(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel gradients with replicate (edge-clamp) padding, unnormalised.

    Returns ``(gx, gy)`` where gx is the horizontal (column-direction)
    derivative and gy the vertical (row-direction) derivative.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("sobel_gradients expects a 2-D map")
    p = np.pad(grid, 1, mode="edge")
    right = p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]
    left = p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2]
    gx = right - left
    down = p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]
    up = p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]
    gy = down - up
    return gx, gy


def sobel_adjoint(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of the replicate-padded Sobel correlation.

    Given an upstream gradient w.r.t. the Sobel output, returns the gradient
    w.r.t. the input map. Needed by the MSGE loss backward pass.
    """
    grad = np.asarray(grad, dtype=np.float64)
    h, w = grad.shape
    padded = np.zeros((h + 2, w + 2))
    for a in range(3):
        for b in range(3):
            if kernel[a, b] != 0.0:
                padded[a : a + h, b : b + w] += kernel[a, b] * grad
    out = padded[1:-1, 1:-1].copy()
    # Fold the replicate-pad contributions back onto the edge pixels.
    out[0, :] += padded[0, 1:-1]
    out[-1, :] += padded[-1, 1:-1]
    out[:, 0] += padded[1:-1, 0]
    out[:, -1] += padded[1:-1, -1]
    out[0, 0] += padded[0, 0]
    out[0, -1] += padded[0, -1]
    out[-1, 0] += padded[-1, 0]
    out[-1, -1] += padded[-1, -1]
    return out


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological dilation with a square (2*radius+1)^2 structuring element."""
    if radius < 1:
        raise ValueError("dilation radius must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    side = 2 * radius + 1
    return ndimage.binary_dilation(mask, structure=np.ones((side, side), dtype=bool))


def relabel_by_first_pixel(labels: np.ndarray) -> np.ndarray:
    """Relabel positive instances contiguously 1..K in raster-scan order of
    each instance's first pixel."""
    labels = np.asarray(labels)
    flat = labels.ravel()
    values, first = np.unique(flat, return_index=True)
    keep = values > 0
    values, first = values[keep], first[keep]
    order = np.argsort(first, kind="stable")
    remap = np.zeros(int(values.max()) + 1 if values.size else 1, dtype=np.int32)
    remap[values[order]] = np.arange(1, values.size + 1, dtype=np.int32)
    return remap[labels]


def connected_components(mask: np.ndarray) -> np.ndarray:
    """4-connected component labeling; labels follow raster-scan order of each
    component's first pixel."""
    mask = np.asarray(mask, dtype=bool)
    raw, _ = ndimage.label(mask, structure=FOUR_CONNECTED)
    return relabel_by_first_pixel(raw.astype(np.int32))


def instance_ids(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    return ids[ids > 0]


def instance_areas(labels: np.ndarray) -> np.ndarray:
    """Pixel counts for labels 1..K (index 0 of the result is label 1)."""
    labels = np.asarray(labels)
    k = int(labels.max()) if labels.size else 0
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    return np.bincount(labels.ravel(), minlength=k + 1)[1:]


def centroids(labels: np.ndarray) -> np.ndarray:
    """(K, 2) array of (row, col) centroids for labels 1..K."""
    labels = np.asarray(labels)
    k = int(labels.max()) if labels.size else 0
    if k == 0:
        return np.zeros((0, 2))
    h, w = labels.shape
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k + 1).astype(np.float64)
    rows = np.repeat(np.arange(h, dtype=np.float64), w)
    cols = np.tile(np.arange(w, dtype=np.float64), h)
    sum_r = np.bincount(flat, weights=rows, minlength=k + 1)
    sum_c = np.bincount(flat, weights=cols, minlength=k + 1)
    if np.any(counts[1:] == 0):
        raise ValueError("label map has gaps in its instance ids")
    return np.stack([sum_r[1:] / counts[1:], sum_c[1:] / counts[1:]], axis=1)


def centroid(labels: np.ndarray, k: int) -> tuple[float, float]:
    """Mean (row, col) of the pixels carrying label ``k``."""
    labels = np.asarray(labels)
    rows, cols = np.nonzero(labels == k)
    if rows.size == 0:
        raise ValueError(f"unknown instance id {k}")
    return float(rows.mean()), float(cols.mean())


def instance_boundary(mask: np.ndarray, dilation_radius: int = 1) -> np.ndarray:
    """Boundary band of a binary mask: |gx|+|gy| > 0 on the float-cast mask
    (replicate-padded Sobel), dilated by ``dilation_radius``."""
    if dilation_radius < 1:
        raise ValueError("dilation_radius must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    gx, gy = sobel_gradients(mask.astype(np.float64))
    edge = (np.abs(gx) + np.abs(gy)) > 0.0
    if not edge.any():
        return edge
    return dilate(edge, dilation_radius)
