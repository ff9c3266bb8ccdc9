"""Small polyline geometry helpers."""

from __future__ import annotations

import numpy as np


def clip_polyline_x(points, x_lo: float, x_hi: float) -> list[np.ndarray]:
    """Clip a polyline to the slab ``x_lo <= x <= x_hi``.

    Segments crossing a slab edge are split at the exact intersection, so the
    total length of the returned pieces equals the length of the polyline
    inside the slab. A polyline lying entirely inside is returned unchanged
    (same vertex values).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return []
    inside = (pts[:, 0] >= x_lo) & (pts[:, 0] <= x_hi)
    if inside.all():
        return [pts.copy()]
    if len(pts) == 1:
        return []

    pieces: list[list[np.ndarray]] = []
    current: list[np.ndarray] = []
    for a, b in zip(pts[:-1], pts[1:]):
        seg = _clip_segment(a, b, x_lo, x_hi)
        if seg is None:
            if current:
                pieces.append(current)
                current = []
            continue
        p, q, t0, t1 = seg
        if current and t0 == 0.0:
            current.append(q)
        else:
            if current:
                pieces.append(current)
            current = [p, q]
        if t1 < 1.0:
            pieces.append(current)
            current = []
    if current:
        pieces.append(current)
    out = []
    for piece in pieces:
        arr = np.array(piece)
        keep = np.ones(len(arr), bool)
        keep[1:] = np.any(arr[1:] != arr[:-1], axis=1)
        arr = arr[keep]
        out.append(arr)
    return out


def _clip_segment(a, b, lo, hi):
    dx = b[0] - a[0]
    t0, t1 = 0.0, 1.0
    if dx == 0.0:
        if a[0] < lo or a[0] > hi:
            return None
    else:
        ta, tb = (lo - a[0]) / dx, (hi - a[0]) / dx
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            return None
    p = a if t0 == 0.0 else a + t0 * (b - a)
    q = b if t1 == 1.0 else a + t1 * (b - a)
    if t0 > 0.0:
        p = np.array([lo if dx > 0 else hi, p[1]])
    if t1 < 1.0:
        q = np.array([hi if dx > 0 else lo, q[1]])
    return p, q, t0, t1


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
