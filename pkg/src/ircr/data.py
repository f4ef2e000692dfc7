"""Synthetic nuclei scenes: generation, augmentation and dataset files.

A scene is a grayscale image of rasterised ellipses (one intensity per
nucleus, Gaussian pixel noise), its ground-truth instance label map, the
ground-truth HV map (signed offsets from each instance centroid, normalised
to [-1, 1] by the instance's bbox half-extents) and a noiseless intensity
field standing in for the hematoxylin channel.

Geometric augmentation is restricted to the dihedral group (horizontal flip
followed by 0..3 counter-clockwise quarter turns) so label maps transform
exactly; the HV channels additionally pick up sign/channel swaps, handled by
``warp_hv``/``unwarp_hv``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import raster
from .tensorio import TensorFileError, load_tensor, save_tensor

_MIN_NUCLEUS_AREA = 12
_MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    nuclei_count_range: tuple[int, int] = (3, 6)
    radius_range: tuple[float, float] = (6.5, 10.0)
    overlap_fraction: float = 0.1
    ellipse_eccentricity_range: tuple[float, float] = (0.0, 0.5)
    intensity_range: tuple[float, float] = (0.35, 0.9)
    noise_sigma: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.size % 4:
            raise ValueError("scene size must be divisible by 4")
        for lo, hi in (
            self.nuclei_count_range,
            self.radius_range,
            self.ellipse_eccentricity_range,
            self.intensity_range,
        ):
            if lo > hi:
                raise ValueError("range bounds must be ordered")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must be in [0, 1]")


@dataclass(frozen=True)
class GeomTransform:
    """Horizontal flip, then ``rot`` counter-clockwise quarter turns."""

    flip: bool = False
    rot: int = 0

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.rot % 4 == 0


IDENTITY = GeomTransform()


@dataclass
class Scene:
    image: np.ndarray  # (1, H, W) in [0, 1]
    gt_labels: np.ndarray  # (H, W) int32
    gt_hv: np.ndarray  # (2, H, W) in [-1, 1]
    h_channel: np.ndarray  # (H, W) in [0, 1]
    labeled: bool = True
    scene_id: int = 0
    seed: int = 0
    geom: GeomTransform = field(default_factory=GeomTransform)


def _triangular(rng: np.random.Generator, lo: float, hi: float) -> float:
    # Mean of two uniforms: mode at the range centre, thin tails at the ends.
    return 0.5 * (rng.uniform(lo, hi) + rng.uniform(lo, hi))


def _ellipse_mask(size: int, center: tuple[float, float], a: float, b: float, theta: float) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    dr = rr - center[0]
    dc = cc - center[1]
    u = dc * np.cos(theta) + dr * np.sin(theta)
    v = -dc * np.sin(theta) + dr * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _is_connected(mask: np.ndarray) -> bool:
    _, count = ndimage.label(mask, structure=raster.FOUR_CONNECTED)
    return count == 1


def hv_from_labels(labels: np.ndarray) -> np.ndarray:
    """HV map of a label map: per instance, signed offsets from the centroid
    normalised by the bbox half-extents."""
    hv = np.zeros((2, *labels.shape))
    for k in raster.instance_ids(labels):
        rows, cols = np.nonzero(labels == k)
        r_mean = rows.mean()
        c_mean = cols.mean()
        half_w = max(c_mean - cols.min(), cols.max() - c_mean)
        half_h = max(r_mean - rows.min(), rows.max() - r_mean)
        if half_w > 0:
            hv[0, rows, cols] = (cols - c_mean) / half_w
        if half_h > 0:
            hv[1, rows, cols] = (rows - r_mean) / half_h
    return hv


def generate_scene(cfg: SceneConfig) -> Scene:
    """Rejection-sample ellipses until the drawn nucleus count is placed.

    A placement is rejected when it would overlap any existing instance by
    more than ``overlap_fraction`` of the smaller area, or would disconnect
    or shrink an existing instance below the minimum size. Later nuclei
    occlude earlier ones on contested pixels.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.size
    lo_n, hi_n = cfg.nuclei_count_range
    n_target = int(rng.integers(lo_n, hi_n + 1))
    labels = np.zeros((size, size), dtype=np.int32)
    intensity = np.zeros((size, size))
    intensities: list[float] = []
    placed = 0
    rejections = 0
    while placed < n_target:
        if rejections > _MAX_REJECTIONS:
            if placed >= lo_n:
                break
            raise ValueError("scene too crowded")
        radius = _triangular(rng, *cfg.radius_range)
        ecc = _triangular(rng, *cfg.ellipse_eccentricity_range)
        theta = rng.uniform(0.0, np.pi)
        margin = radius + 1.0
        if size - 2.0 * margin <= 1.0:
            raise ValueError("scene too crowded")
        center = (rng.uniform(margin, size - margin), rng.uniform(margin, size - margin))
        level = _triangular(rng, *cfg.intensity_range)
        a = radius
        b = radius * np.sqrt(1.0 - ecc**2)
        mask = _ellipse_mask(size, center, a, b, theta)
        new_area = int(mask.sum())
        if new_area < _MIN_NUCLEUS_AREA:
            rejections += 1
            continue
        areas = raster.instance_areas(labels)
        inter = np.bincount(labels[mask], minlength=placed + 1)[1:]
        if np.any(inter > cfg.overlap_fraction * np.minimum(areas, new_area)):
            rejections += 1
            continue
        prev = labels[mask].copy()
        labels[mask] = placed + 1
        ok = True
        for k in np.unique(prev[prev > 0]):
            remaining = labels == k
            if remaining.sum() < _MIN_NUCLEUS_AREA or not _is_connected(remaining):
                ok = False
                break
        if not ok:
            labels[mask] = prev
            rejections += 1
            continue
        intensity[mask] = level
        intensities.append(level)
        placed += 1
    image = np.clip(intensity + rng.normal(0.0, cfg.noise_sigma, (size, size)), 0.0, 1.0)
    return Scene(
        image=image[None],
        gt_labels=labels,
        gt_hv=hv_from_labels(labels),
        h_channel=intensity.copy(),
        labeled=True,
        scene_id=0,
        seed=cfg.seed,
    )


def generate_scenes(cfg: SceneConfig, n_scenes: int) -> list[Scene]:
    """``n_scenes`` independent scenes seeded ``cfg.seed + i``."""
    scenes = []
    for i in range(n_scenes):
        scene = generate_scene(replace(cfg, seed=cfg.seed + i))
        scene.scene_id = i
        scenes.append(scene)
    return scenes


# ---------------------------------------------------------------------------
# Geometric warps (exact on the dihedral group)

def warp_map(grid: np.ndarray, geom: GeomTransform) -> np.ndarray:
    """Positional warp of an (H, W) map: flip, then rotate CCW."""
    if geom.flip:
        grid = grid[:, ::-1]
    return np.ascontiguousarray(np.rot90(grid, geom.rot % 4))


def unwarp_map(grid: np.ndarray, geom: GeomTransform) -> np.ndarray:
    grid = np.rot90(grid, -(geom.rot % 4))
    if geom.flip:
        grid = grid[:, ::-1]
    return np.ascontiguousarray(grid)


def warp_stack(stack: np.ndarray, geom: GeomTransform) -> np.ndarray:
    return np.stack([warp_map(ch, geom) for ch in stack])


def unwarp_stack(stack: np.ndarray, geom: GeomTransform) -> np.ndarray:
    return np.stack([unwarp_map(ch, geom) for ch in stack])


def warp_hv(hv: np.ndarray, geom: GeomTransform) -> np.ndarray:
    """Warp an HV map, including the channel sign algebra: a horizontal flip
    negates and mirrors the horizontal channel; a CCW quarter turn maps
    (h, v) -> (rot(v), -rot(h))."""
    h, v = hv[0], hv[1]
    if geom.flip:
        h = -h[:, ::-1]
        v = v[:, ::-1]
    for _ in range(geom.rot % 4):
        h, v = np.rot90(v), -np.rot90(h)
    return np.ascontiguousarray(np.stack([h, v]))


def unwarp_hv(hv: np.ndarray, geom: GeomTransform) -> np.ndarray:
    h, v = hv[0], hv[1]
    for _ in range(geom.rot % 4):
        h, v = -np.rot90(v, -1), np.rot90(h, -1)
    if geom.flip:
        h = -h[:, ::-1]
        v = v[:, ::-1]
    return np.ascontiguousarray(np.stack([h, v]))


def warp_outputs(np_probs: np.ndarray, hv: np.ndarray, geom: GeomTransform) -> tuple[np.ndarray, np.ndarray]:
    """Warp model output maps into an augmented frame. The same functions
    align gradients back: the warps are orthogonal, so the adjoint of
    ``unwarp`` is ``warp`` (and vice versa)."""
    return warp_stack(np_probs, geom), warp_hv(hv, geom)


def unwarp_outputs(np_probs: np.ndarray, hv: np.ndarray, geom: GeomTransform) -> tuple[np.ndarray, np.ndarray]:
    return unwarp_stack(np_probs, geom), unwarp_hv(hv, geom)


def _draw_geom(rng: np.random.Generator) -> GeomTransform:
    return GeomTransform(flip=bool(rng.integers(0, 2)), rot=int(rng.integers(0, 4)))


def _apply_geom(scene: Scene, geom: GeomTransform) -> Scene:
    return replace(
        scene,
        image=warp_stack(scene.image, geom),
        gt_labels=warp_map(scene.gt_labels, geom).astype(np.int32),
        gt_hv=warp_hv(scene.gt_hv, geom),
        h_channel=warp_map(scene.h_channel, geom),
        geom=geom,
    )


def weak_augment(scene: Scene, seed: int) -> Scene:
    """Label-consistent geometric augmentation (flip + quarter turns); the
    applied transform is recorded on the returned scene."""
    rng = np.random.default_rng(seed)
    return _apply_geom(scene, _draw_geom(rng))


def strong_augment(scene: Scene, seed: int) -> Scene:
    """Weak augmentation (same geometric draw for the same seed) plus
    image-only brightness/contrast jitter and additive Gaussian noise."""
    rng = np.random.default_rng(seed)
    out = _apply_geom(scene, _draw_geom(rng))
    img = out.image[0]
    contrast = rng.uniform(0.8, 1.2)
    brightness = rng.uniform(-0.15, 0.15)
    img = (img - 0.5) * contrast + 0.5 + brightness
    sigma = rng.uniform(0.0, 0.1)
    img = img + rng.normal(0.0, 1.0, img.shape) * sigma
    out.image = np.clip(img, 0.0, 1.0)[None]
    return out


# ---------------------------------------------------------------------------
# Dataset files

def save_dataset(directory: str | Path, scenes: list[Scene]) -> None:
    """Write ``manifest.csv`` plus per-scene IRCR-T files ``img_<id>``,
    ``lbl_<id>``, ``hv_<id>``, ``hch_<id>``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "labeled", "seed"])
        for scene in scenes:
            writer.writerow([scene.scene_id, int(scene.labeled), scene.seed])
            save_tensor(directory / f"img_{scene.scene_id}", scene.image)
            save_tensor(directory / f"lbl_{scene.scene_id}", scene.gt_labels.astype(np.int32))
            save_tensor(directory / f"hv_{scene.scene_id}", scene.gt_hv)
            save_tensor(directory / f"hch_{scene.scene_id}", scene.h_channel)


def load_dataset(directory: str | Path) -> list[Scene]:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise TensorFileError(f"missing manifest: {manifest}")
    scenes: list[Scene] = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = int(row["id"])
            arrays = {}
            for prefix in ("img", "lbl", "hv", "hch"):
                path = directory / f"{prefix}_{sid}"
                if not path.exists():
                    raise TensorFileError(f"scene {sid}: missing file {path}")
                arrays[prefix] = load_tensor(path)
            scenes.append(
                Scene(
                    image=arrays["img"],
                    gt_labels=arrays["lbl"],
                    gt_hv=arrays["hv"],
                    h_channel=arrays["hch"],
                    labeled=bool(int(row["labeled"])),
                    scene_id=sid,
                    seed=int(row["seed"]),
                )
            )
    return scenes


def split_labeled(scenes: list[Scene], ratio: float, seed: int) -> tuple[list[Scene], list[Scene]]:
    """Deterministic shuffled split; the labeled side gets
    max(1, round(ratio * n)) scenes."""
    if not scenes:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    n = len(scenes)
    n_labeled = max(1, int(np.floor(ratio * n + 0.5)))
    order = np.random.default_rng(seed).permutation(n)
    labeled = [replace(scenes[i], labeled=True) for i in sorted(order[:n_labeled])]
    unlabeled = [replace(scenes[i], labeled=False) for i in sorted(order[n_labeled:])]
    return labeled, unlabeled
