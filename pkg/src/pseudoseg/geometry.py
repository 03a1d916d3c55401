"""Polygon primitives: validation, shoelace area, rasterization, clipping.

Polygons are flat coordinate sequences ``[x1, y1, x2, y2, ...]`` in pixel
units, with the image occupying ``[0, width] x [0, height]``.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

COORD_DECIMALS = 6


def round_coord(v: float) -> float:
    """Snap a coordinate onto the 6-decimal grid used for serialization."""
    r = round(float(v), COORD_DECIMALS)
    return 0.0 if r == 0 else r  # drop negative zero


def check_polygon(poly: Sequence[float], what: str = "polygon") -> None:
    if len(poly) % 2:
        raise ValidationError(f"{what}: odd number of coordinates ({len(poly)})")
    if len(poly) < 6:
        raise ValidationError(f"{what}: needs at least 3 vertices, got {len(poly) // 2}")
    for v in poly:
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise ValidationError(f"{what}: non-finite or non-numeric coordinate {v!r}")


def polygon_area(poly: Sequence[float]) -> float:
    """Absolute shoelace area of a simple or self-intersecting polygon."""
    if len(poly) % 2 or len(poly) < 6:
        raise ValidationError(f"polygon needs >= 3 vertices and even length, got {len(poly)} coordinates")
    xs = np.asarray(poly[0::2], dtype=np.float64)
    ys = np.asarray(poly[1::2], dtype=np.float64)
    return abs(float(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))) / 2.0


def polygons_bbox(polygons: Iterable[Sequence[float]]) -> list[float]:
    """Tight ``[x, y, w, h]`` bounds of the union of the polygons."""
    xs: list[float] = []
    ys: list[float] = []
    for p in polygons:
        xs.extend(p[0::2])
        ys.extend(p[1::2])
    if not xs:
        return [0.0, 0.0, 0.0, 0.0]
    x0, y0 = min(xs), min(ys)
    return [round_coord(x0), round_coord(y0), round_coord(max(xs) - x0), round_coord(max(ys) - y0)]


def _fill_even_odd(mask: np.ndarray, poly: Sequence[float]) -> None:
    height, width = mask.shape
    x1 = np.asarray(poly[0::2], dtype=np.float64)
    y1 = np.asarray(poly[1::2], dtype=np.float64)
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)

    r0 = max(0, int(math.floor(y1.min() - 0.5)))
    r1 = min(height, int(math.ceil(y1.max() + 0.5)))
    if r0 >= r1:
        return
    centers_x = np.arange(width, dtype=np.float64) + 0.5
    inside = np.zeros((r1 - r0, width), dtype=bool)
    for i, r in enumerate(range(r0, r1)):
        yc = r + 0.5
        # half-open edge rule: an edge counts when exactly one endpoint lies strictly above yc
        hit = (y1 > yc) != (y2 > yc)
        if not hit.any():
            continue
        ax, ay, bx, by = x1[hit], y1[hit], x2[hit], y2[hit]
        xcross = np.sort((bx - ax) * (yc - ay) / (by - ay) + ax)
        # crossings strictly to the right of each pixel center
        right = xcross.size - np.searchsorted(xcross, centers_x, side="right")
        inside[i] = (right & 1).astype(bool)
    mask[r0:r1] |= inside


def rasterize(polygons: Iterable[Sequence[float]], width: int, height: int) -> np.ndarray:
    """Binary ``(height, width)`` mask of pixel centers inside any polygon.

    Each polygon is filled with the even-odd rule, sampling pixel (r, c) at
    ``(c + 0.5, r + 0.5)``. An edge is crossed when exactly one endpoint is
    strictly below the sample row and the crossing lies strictly to the right
    of the sample, so points exactly on a left or bottom edge are inside and
    points on a right or top edge are outside. Multiple polygons are unioned.
    """
    if width <= 0 or height <= 0:
        raise ValidationError(f"raster size must be positive, got {width}x{height}")
    mask = np.zeros((int(height), int(width)), dtype=bool)
    for poly in polygons:
        if len(poly) >= 6:
            _fill_even_odd(mask, poly)
    return mask


def _clip_edge(pts, inside, intersect):
    out = []
    n = len(pts)
    for i in range(n):
        cur, prev = pts[i], pts[i - 1]
        if inside(cur):
            if not inside(prev):
                out.append(intersect(prev, cur))
            out.append(cur)
        elif inside(prev):
            out.append(intersect(prev, cur))
    return out


def clip_polygon(poly: Sequence[float], width: float, height: float) -> list[float]:
    """Sutherland-Hodgman clip of a polygon to ``[0, width] x [0, height]``.

    Returns a flat coordinate list, possibly with fewer than 3 vertices when
    the polygon lies outside the rectangle.
    """
    pts = list(zip(poly[0::2], poly[1::2]))

    def at_x(xv):
        def f(p, q):
            t = (xv - p[0]) / (q[0] - p[0])
            return (xv, p[1] + t * (q[1] - p[1]))
        return f

    def at_y(yv):
        def f(p, q):
            t = (yv - p[1]) / (q[1] - p[1])
            return (p[0] + t * (q[0] - p[0]), yv)
        return f

    for inside, intersect in (
        (lambda p: p[0] >= 0, at_x(0.0)),
        (lambda p: p[0] <= width, at_x(float(width))),
        (lambda p: p[1] >= 0, at_y(0.0)),
        (lambda p: p[1] <= height, at_y(float(height))),
    ):
        if not pts:
            break
        pts = _clip_edge(pts, inside, intersect)

    flat: list[float] = []
    last = None
    for x, y in pts:
        q = (round_coord(x), round_coord(y))
        if q != last:
            flat.extend(q)
            last = q
    if len(flat) >= 4 and flat[:2] == flat[-2:]:
        del flat[-2:]
    return flat
