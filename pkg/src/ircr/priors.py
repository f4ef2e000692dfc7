"""Morphological priors: per-instance shape/intensity features, a per-channel
Gaussian KDE bank fitted on trusted instances, instance likelihood scoring and
the PIAC weighting mask.

Feature channels (in order): area in px^2, solidity (area / convex hull area),
circularity (4*pi*area / perimeter^2), mean intensity in the H channel, extent
(area / bounding-rectangle area). Channels are min-max normalised to [0, 1]
with the fitted sample bounds before any density evaluation, so the average in
the likelihood score mixes commensurate quantities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_FEATURES = 5
FEATURE_NAMES = ("area", "solidity", "circularity", "mean_h_intensity", "extent")


@dataclass(frozen=True)
class FeatureVector:
    area: float
    solidity: float
    circularity: float
    mean_h_intensity: float
    extent: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.area, self.solidity, self.circularity, self.mean_h_intensity, self.extent]
        )

    @staticmethod
    def from_array(z: np.ndarray) -> "FeatureVector":
        return FeatureVector(*(float(x) for x in z))


@dataclass(frozen=True)
class PiacConfig:
    tau: float = 0.35
    w: float = 2.0

    def __post_init__(self) -> None:
        if self.tau <= 0.0 or self.w <= 0.0:
            raise ValueError("tau and w must be positive")


@dataclass(frozen=True)
class PriorBank:
    """Raw samples plus per-channel normalisation bounds and bandwidths."""

    samples: np.ndarray  # (N, 5) raw feature rows
    lo: np.ndarray  # (5,)
    hi: np.ndarray  # (5,)
    bandwidths: np.ndarray  # (5,), in normalised units

    @property
    def sample_count(self) -> int:
        return self.samples.shape[0]

    def normalized_samples(self, channel: int) -> np.ndarray:
        return (self.samples[:, channel] - self.lo[channel]) / (self.hi[channel] - self.lo[channel])

    def normalize(self, z: np.ndarray) -> np.ndarray:
        """Min-max normalise a raw feature row, clamped to [0, 1]."""
        return np.clip((np.asarray(z, dtype=np.float64) - self.lo) / (self.hi - self.lo), 0.0, 1.0)


def _convex_hull_area(points: np.ndarray) -> float:
    """Area of the convex hull of integer points (monotone chain + shoelace)."""
    pts = np.unique(points, axis=0)
    if pts.shape[0] < 3:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b) -> float:
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    area = 0.0
    for i in range(len(hull)):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % len(hull)]
        area += float(x0) * float(y1) - float(x1) * float(y0)
    return abs(area) / 2.0


def _perimeter_edges(inst: np.ndarray) -> int:
    """Count pixel edges between instance pixels and anything else (the image
    frame counts as outside)."""
    padded = np.pad(inst, 1, mode="constant", constant_values=False)
    edges = 0
    edges += int((padded[1:, :] & ~padded[:-1, :]).sum())
    edges += int((padded[:-1, :] & ~padded[1:, :]).sum())
    edges += int((padded[:, 1:] & ~padded[:, :-1]).sum())
    edges += int((padded[:, :-1] & ~padded[:, 1:]).sum())
    return edges


def extract_features(labels: np.ndarray, k: int, h_channel: np.ndarray) -> FeatureVector:
    """Morphological feature vector of instance ``k`` in a label map."""
    labels = np.asarray(labels)
    inst = labels == k
    area = int(inst.sum())
    if k <= 0 or area == 0:
        raise ValueError(f"unknown instance id {k}")
    rows, cols = np.nonzero(inst)
    # Convex hull over the pixel corner lattice; a solid axis-aligned
    # rectangle then gets hull area == pixel area exactly.
    corners = np.concatenate(
        [
            np.stack([rows, cols], axis=1),
            np.stack([rows + 1, cols], axis=1),
            np.stack([rows, cols + 1], axis=1),
            np.stack([rows + 1, cols + 1], axis=1),
        ]
    )
    hull_area = _convex_hull_area(corners)
    solidity = area / hull_area if hull_area > 0 else 1.0
    perimeter = _perimeter_edges(inst)
    circularity = 4.0 * math.pi * area / float(perimeter) ** 2
    intensity = float(np.asarray(h_channel, dtype=np.float64)[inst].mean())
    bbox_area = (int(rows.max()) - int(rows.min()) + 1) * (int(cols.max()) - int(cols.min()) + 1)
    extent = area / bbox_area
    return FeatureVector(float(area), solidity, circularity, intensity, extent)


def extract_all_features(labels: np.ndarray, h_channel: np.ndarray) -> np.ndarray:
    """(K, 5) feature rows for labels 1..K."""
    k = int(labels.max()) if labels.size else 0
    return np.array(
        [extract_features(labels, i, h_channel).as_array() for i in range(1, k + 1)]
    ).reshape(k, N_FEATURES)


def fit_kde(samples, bandwidth_rule="auto") -> PriorBank:
    """Fit the per-channel KDE bank.

    ``bandwidth_rule`` is either ``"auto"`` (Silverman-style
    h = 1.06 * sigma * N^(-1/5) on the normalised samples, floored at 1e-3)
    or a fixed positive bandwidth used for every channel.
    """
    if isinstance(samples, np.ndarray):
        raw = np.asarray(samples, dtype=np.float64)
    else:
        raw = np.array([s.as_array() for s in samples], dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != N_FEATURES:
        raise ValueError(f"samples must be (N, {N_FEATURES})")
    n = raw.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples to fit the prior bank")
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    degenerate = np.flatnonzero(hi == lo)
    if degenerate.size:
        raise ValueError(f"degenerate feature channel {FEATURE_NAMES[degenerate[0]]}")
    if bandwidth_rule == "auto":
        normed = (raw - lo) / (hi - lo)
        sigma = normed.std(axis=0)
        h = np.maximum(1.06 * sigma * n ** (-0.2), 1e-3)
    else:
        h_fixed = float(bandwidth_rule)
        if h_fixed <= 0.0:
            raise ValueError("fixed bandwidth must be positive")
        h = np.full(N_FEATURES, h_fixed)
    return PriorBank(samples=raw, lo=lo, hi=hi, bandwidths=h)


def density(bank: PriorBank, channel: int, x: float) -> float:
    """Gaussian KDE density of one channel at a normalised coordinate ``x``."""
    if not 0 <= channel < N_FEATURES:
        raise ValueError(f"channel index {channel} out of range")
    xs = bank.normalized_samples(channel)
    h = float(bank.bandwidths[channel])
    z = (x - xs) / h
    return float(np.exp(-0.5 * z**2).sum() / (math.sqrt(2.0 * math.pi) * xs.size * h))


def score_instance(bank: PriorBank, z) -> float:
    """Likelihood of a feature row being a real nucleus: the mean of the five
    per-channel densities at the (clamped) normalised coordinates."""
    if isinstance(z, FeatureVector):
        z = z.as_array()
    zn = bank.normalize(z)
    return float(np.mean([density(bank, c, float(zn[c])) for c in range(N_FEATURES)]))


def piac_mask(labels: np.ndarray, scores, cfg: PiacConfig) -> np.ndarray:
    """Weight map U: 0 on pixels of instances scoring below tau, w elsewhere
    (background included)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    k = int(labels.max()) if labels.size else 0
    if scores.shape[0] != k:
        raise ValueError(f"expected {k} scores, got {scores.shape[0]}")
    u = np.full(labels.shape, cfg.w)
    low = np.flatnonzero(scores < cfg.tau) + 1
    if low.size:
        u[np.isin(labels, low)] = 0.0
    return u


def save_prior_bank(path: str | Path, bank: PriorBank) -> None:
    """Write the bank in the IRCR-PRIORS v1 text format."""
    lines = ["IRCR-PRIORS v1", f"N={bank.sample_count}"]
    for c in range(N_FEATURES):
        lines.append(
            f"channel={c} h={float(bank.bandwidths[c])!r} "
            f"min={float(bank.lo[c])!r} max={float(bank.hi[c])!r}"
        )
    for row in bank.samples:
        lines.append(",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_prior_bank(path: str | Path) -> PriorBank:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "IRCR-PRIORS v1":
        raise ValueError(f"{path}: not an IRCR-PRIORS v1 file")
    if not lines[1].startswith("N="):
        raise ValueError(f"{path}: missing sample count")
    n = int(lines[1][2:])
    h = np.zeros(N_FEATURES)
    lo = np.zeros(N_FEATURES)
    hi = np.zeros(N_FEATURES)
    for c in range(N_FEATURES):
        fields = dict(part.split("=", 1) for part in lines[2 + c].split())
        if int(fields["channel"]) != c:
            raise ValueError(f"{path}: channel lines out of order")
        h[c] = float(fields["h"])
        lo[c] = float(fields["min"])
        hi[c] = float(fields["max"])
    rows = [
        np.array([float(x) for x in line.split(",")]) for line in lines[2 + N_FEATURES :] if line
    ]
    samples = np.array(rows)
    if samples.shape != (n, N_FEATURES):
        raise ValueError(f"{path}: expected {n} sample rows, found {samples.shape[0]}")
    return PriorBank(samples=samples, lo=lo, hi=hi, bandwidths=h)
