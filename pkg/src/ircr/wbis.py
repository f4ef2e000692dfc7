"""Watershed-based instance segmentation (WBIS) of NP probability and HV
distance maps.

The energy landscape is built from the horizontal gradient of the horizontal
distance channel and the vertical gradient of the vertical channel; touching
instances produce a high-energy ridge along their contact line, which the
marker-controlled priority flood respects.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import raster


@dataclass(frozen=True)
class WbisParams:
    fg_threshold: float = 0.5
    marker_threshold: float = 0.4
    min_instance_area: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.fg_threshold < 1.0:
            raise ValueError("fg_threshold must be in (0, 1)")
        if not 0.0 < self.marker_threshold < 1.0:
            raise ValueError("marker_threshold must be in (0, 1)")
        if self.min_instance_area < 1:
            raise ValueError("min_instance_area must be >= 1")


def _rescale01(grid: np.ndarray) -> np.ndarray:
    lo = grid.min()
    hi = grid.max()
    if hi == lo:
        # Constant channel carries no ridge information; contributes zeros.
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def energy_landscape(hv: np.ndarray) -> np.ndarray:
    """Pixelwise max of the min-max rescaled |d/dx hv_h| and |d/dy hv_v|."""
    hv = np.asarray(hv, dtype=np.float64)
    if hv.ndim != 3 or hv.shape[0] != 2:
        raise ValueError("hv must have shape (2, H, W)")
    gx, _ = raster.sobel_gradients(hv[0])
    _, gy = raster.sobel_gradients(hv[1])
    return np.maximum(_rescale01(np.abs(gx)), _rescale01(np.abs(gy)))


def watershed(energy: np.ndarray, markers: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Marker-controlled priority flood.

    Pixels are popped from a min-priority queue keyed by (energy, insertion
    order); an unlabeled masked pixel takes the label of the neighbor that
    popped it. Masked pixels not connected to any marker stay 0.
    """
    energy = np.asarray(energy, dtype=np.float64)
    markers = np.asarray(markers, dtype=np.int32)
    mask = np.asarray(mask, dtype=bool)
    if not (energy.shape == markers.shape == mask.shape):
        raise ValueError("energy, markers and mask must share a shape")
    if np.any(markers[~mask] != 0):
        raise ValueError("markers must be zero outside the mask")

    h, w = energy.shape
    out = markers.copy()
    heap: list[tuple[float, int, int]] = []
    counter = 0
    seeds = np.flatnonzero((markers.ravel() != 0) & mask.ravel())
    eflat = energy.ravel()
    oflat = out.ravel()
    mflat = mask.ravel()
    for idx in seeds:
        heapq.heappush(heap, (eflat[idx], counter, int(idx)))
        counter += 1
    while heap:
        _, _, idx = heapq.heappop(heap)
        label = oflat[idx]
        r, c = divmod(idx, w)
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w:
                nidx = nr * w + nc
                if mflat[nidx] and oflat[nidx] == 0:
                    oflat[nidx] = label
                    heapq.heappush(heap, (eflat[nidx], counter, nidx))
                    counter += 1
    return out


def segment_instances(np_prob: np.ndarray, hv: np.ndarray, params: WbisParams) -> np.ndarray:
    """NP/HV maps -> instance label map.

    Foreground-thresholds the NP probability map, seeds markers where the HV
    energy is low, priority-floods the energy inside the foreground, drops
    instances below the minimum area and relabels contiguously.
    """
    np_prob = np.asarray(np_prob, dtype=np.float64)
    fg = np_prob > params.fg_threshold
    if not fg.any():
        return np.zeros(np_prob.shape, dtype=np.int32)
    energy = energy_landscape(hv)
    markers = raster.connected_components(fg & (energy < params.marker_threshold))
    labels = watershed(energy, markers, fg)
    if params.min_instance_area > 1:
        areas = raster.instance_areas(labels)
        small = np.flatnonzero(areas < params.min_instance_area) + 1
        if small.size:
            labels[np.isin(labels, small)] = 0
    return raster.relabel_by_first_pixel(labels)
