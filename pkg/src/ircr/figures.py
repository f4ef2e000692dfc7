"""Deterministic SVG figures emitted as plain text (no plotting dependency)."""

from __future__ import annotations

import numpy as np

from . import raster
from .matching import MatchResult

_SERIES_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".")


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    )
    return "\n".join([head, *body, "</svg>"]) + "\n"


def match_overlay(
    teacher: np.ndarray, student: np.ndarray, match: MatchResult, scale: int = 8
) -> str:
    """Centroid overlay: teacher circles, student squares, matched pairs
    joined by a line, unmatched instances crossed out."""
    h, w = teacher.shape
    ct = raster.centroids(teacher)
    cs = raster.centroids(student)
    body = [f'<rect width="{w * scale}" height="{h * scale}" fill="#ffffff"/>']
    for t_id, s_id, _ in match.pairs:
        r0, c0 = ct[t_id - 1]
        r1, c1 = cs[s_id - 1]
        body.append(
            f'<line x1="{_fmt(c0 * scale)}" y1="{_fmt(r0 * scale)}" '
            f'x2="{_fmt(c1 * scale)}" y2="{_fmt(r1 * scale)}" stroke="#2ca02c" stroke-width="2"/>'
        )
    for k, (r, c) in enumerate(ct, start=1):
        color = "#1f77b4" if k not in match.unmatched_teacher else "#d62728"
        body.append(
            f'<circle cx="{_fmt(c * scale)}" cy="{_fmt(r * scale)}" r="5" '
            f'fill="none" stroke="{color}" stroke-width="2"/>'
        )
    for k, (r, c) in enumerate(cs, start=1):
        color = "#ff7f0e" if k not in match.unmatched_student else "#d62728"
        x, y = c * scale, r * scale
        body.append(
            f'<rect x="{_fmt(x - 4)}" y="{_fmt(y - 4)}" width="8" height="8" '
            f'fill="none" stroke="{color}" stroke-width="2"/>'
        )
    return _svg(w * scale, h * scale, body)


def line_plot(
    series: dict[str, list[float]], title: str, width: int = 640, height: int = 360
) -> str:
    """Simple multi-series line plot with a text legend."""
    pad = 48
    body = [f'<rect width="{width}" height="{height}" fill="#ffffff"/>']
    values = [v for ys in series.values() for v in ys if np.isfinite(v)]
    if not values:
        values = [0.0]
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0
    n = max(len(ys) for ys in series.values()) if series else 1

    def px(i: int) -> float:
        return pad + (width - 2 * pad) * (i / max(n - 1, 1))

    def py(v: float) -> float:
        return height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))

    body.append(
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
        f'fill="none" stroke="#cccccc"/>'
    )
    body.append(f'<text x="{pad}" y="24" font-size="14">{title}</text>')
    body.append(f'<text x="4" y="{py(lo) + 4:.1f}" font-size="10">{_fmt(lo)}</text>')
    body.append(f'<text x="4" y="{py(hi) + 4:.1f}" font-size="10">{_fmt(hi)}</text>')
    for idx, (name, ys) in enumerate(series.items()):
        color = _SERIES_COLORS[idx % len(_SERIES_COLORS)]
        points = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(ys))
        body.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        body.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * (idx + 1)}" font-size="10" '
            f'fill="{color}">{name}</text>'
        )
    return _svg(width, height, body)


def bar_chart(
    labels: list[str], values: list[float], title: str, width: int = 480, height: int = 320
) -> str:
    pad = 48
    body = [f'<rect width="{width}" height="{height}" fill="#ffffff"/>']
    body.append(f'<text x="{pad}" y="24" font-size="14">{title}</text>')
    hi = max([*values, 1e-9])
    n = len(values)
    slot = (width - 2 * pad) / max(n, 1)
    for i, (label, v) in enumerate(zip(labels, values)):
        bh = (height - 2 * pad) * (v / hi)
        x = pad + i * slot + 0.15 * slot
        y = height - pad - bh
        body.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{0.7 * slot:.1f}" height="{bh:.1f}" '
            f'fill="#1f77b4"/>'
        )
        body.append(
            f'<text x="{x:.1f}" y="{height - pad + 14}" font-size="10">{label}</text>'
        )
        body.append(f'<text x="{x:.1f}" y="{y - 4:.1f}" font-size="10">{_fmt(v)}</text>')
    return _svg(width, height, body)
