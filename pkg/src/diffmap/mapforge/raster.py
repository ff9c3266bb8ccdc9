"""Rasterization and padding utilities."""

from __future__ import annotations

import numpy as np

from diffmap.errors import ContractError
from diffmap.mapforge.types import GridSpec, SemanticMap

# distances within this many meters of the stroke radius count as inside
DIST_TOL = 1e-9


def segment_distances(points, grid: GridSpec, max_dist: float | None = None):
    """Distance from every pixel center to a polyline.

    Args:
      points: (N, 2) polyline vertices in meters.
      grid: target raster geometry.
      max_dist: if given, only pixels within this distance of a segment's
        bounding box are evaluated; the rest stay at ``inf``.

    Returns:
      ``(dist, seg)``: H×W float64 distances and the index of the nearest
      segment (-1 where untouched). A single point counts as segment 0.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h, w = grid.shape
    dist = np.full((h, w), np.inf)
    seg = np.full((h, w), -1, dtype=np.int64)
    if len(pts) == 0:
        return dist, seg
    if len(pts) == 1:
        pts = np.vstack([pts, pts])
    res = grid.resolution
    x0, y0 = grid.x_range[0], grid.y_range[0]
    pad = np.inf if max_dist is None else max_dist
    for i, (a, b) in enumerate(zip(pts[:-1], pts[1:])):
        lo = np.minimum(a, b) - pad
        hi = np.maximum(a, b) + pad
        c0 = 0 if not np.isfinite(lo[0]) else max(int(np.floor((lo[0] - x0) / res - 0.5)), 0)
        c1 = w if not np.isfinite(hi[0]) else min(int(np.ceil((hi[0] - x0) / res - 0.5)) + 1, w)
        r0 = 0 if not np.isfinite(lo[1]) else max(int(np.floor((lo[1] - y0) / res - 0.5)), 0)
        r1 = h if not np.isfinite(hi[1]) else min(int(np.ceil((hi[1] - y0) / res - 0.5)) + 1, h)
        if c0 >= c1 or r0 >= r1:
            continue
        xs = x0 + (np.arange(c0, c1) + 0.5) * res
        ys = y0 + (np.arange(r0, r1) + 0.5) * res
        px, py = np.meshgrid(xs, ys)
        d = _point_segment_distance(px, py, a, b)
        block = dist[r0:r1, c0:c1]
        closer = d < block
        block[closer] = d[closer]
        seg[r0:r1, c0:c1][closer] = i
    return dist, seg


def _point_segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def rasterize_polyline(points, width_px: int, grid: GridSpec) -> np.ndarray:
    """Binary mask of pixels whose center lies within ``width_px * res / 2`` of the polyline."""
    if width_px < 1:
        raise ContractError(f"width_px must be >= 1, got {width_px}")
    radius = width_px * grid.resolution / 2
    dist, _ = segment_distances(points, grid, max_dist=radius + grid.resolution)
    return (dist <= radius + DIST_TOL).astype(np.uint8)


def pad_to_multiple(x, k: int = 64):
    """Zero-pad on the bottom/right so H and W become multiples of ``k``.

    Accepts a :class:`SemanticMap` or an array whose last two axes are H, W.
    Returns ``(padded, (row_offset, col_offset))``; offsets locate the
    original region in the padded output and are always (0, 0) for
    bottom/right padding.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if isinstance(x, SemanticMap):
        h, w = x.grid.shape
        hp, wp = -(-h // k) * k, -(-w // k) * k
        out = SemanticMap(
            _pad(x.semantic, hp, wp), _pad(x.instance, hp, wp), _pad(x.direction, hp, wp),
            x.grid.padded(hp, wp),
        )
        return out, (0, 0)
    x = np.asarray(x)
    h, w = x.shape[-2:]
    hp, wp = -(-h // k) * k, -(-w // k) * k
    return _pad(x, hp, wp), (0, 0)


def _pad(a, hp, wp):
    h, w = a.shape[-2:]
    widths = [(0, 0)] * (a.ndim - 2) + [(0, hp - h), (0, wp - w)]
    return np.pad(a, widths)


def crop(x, offsets, shape):
    """Inverse of :func:`pad_to_multiple` given the original (H, W)."""
    r, c = offsets
    h, w = shape
    if isinstance(x, SemanticMap):
        g = x.grid
        grid = GridSpec(h, w, g.resolution,
                        (g.x_range[0] + c * g.resolution, g.x_range[0] + (c + w) * g.resolution),
                        (g.y_range[0] + r * g.resolution, g.y_range[0] + (r + h) * g.resolution))
        return SemanticMap(x.semantic[:, r:r + h, c:c + w], x.instance[r:r + h, c:c + w],
                           x.direction[r:r + h, c:c + w], grid)
    return np.asarray(x)[..., r:r + h, c:c + w]
