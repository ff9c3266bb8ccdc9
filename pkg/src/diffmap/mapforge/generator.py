"""Parametric generator of structured road maps.

A scene is one road running roughly along +x: two boundary curves, one to
three dividers at constant normal offsets from the centerline (so they stay
parallel to the boundaries), and optionally a pedestrian crossing drawn as
stripes perpendicular to the road axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from diffmap.errors import ConfigError
from diffmap.mapforge.corrupt import CorruptionConfig, corrupt
from diffmap.mapforge.geometry import clip_polyline_x
from diffmap.mapforge.raster import segment_distances
from diffmap.mapforge.types import (
    NUM_CLASSES, NUM_DIRECTIONS, GridSpec, MapSample, Polyline, PolylineSet, SemanticMap,
    angle_to_bin,
)

DIVIDER, PED_CROSSING, BOUNDARY = 0, 1, 2

DEFAULT_CORRUPTION = CorruptionConfig(
    dropout_patch_rate=0.15, patch_size_px=12, blur_sigma_px=0.8, jitter_px=1.5,
    erosion_dilation_px=0, flip_label_rate=0.01,
)


@dataclass(frozen=True)
class SceneConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(128, 64))
    p_ped: float = 0.5
    min_dividers: int = 1
    max_dividers: int = 3
    half_width_m: tuple[float, float] = (3.0, 7.0)
    max_heading_deg: float = 10.0
    max_curvature: float = 0.02  # 1/m, quadratic bend coefficient
    divider_width_px: int = 3
    boundary_width_px: int = 3
    stripe_width_px: int = 3
    stripe_gap_px: int = 3
    stripes: tuple[int, int] = (3, 5)
    corruption: CorruptionConfig = DEFAULT_CORRUPTION

    def __post_init__(self):
        if not 0.0 <= self.p_ped <= 1.0:
            raise ConfigError("p_ped must lie in [0, 1]")
        if not 1 <= self.min_dividers <= self.max_dividers:
            raise ConfigError("need 1 <= min_dividers <= max_dividers")
        if min(self.divider_width_px, self.boundary_width_px, self.stripe_width_px) < 1:
            raise ConfigError("stroke widths must be >= 1 px")

    def stroke_width(self, class_id: int) -> int:
        return (self.divider_width_px, self.stripe_width_px, self.boundary_width_px)[class_id]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["grid"] = GridSpec.from_dict(d["grid"])
        d["corruption"] = CorruptionConfig(**d["corruption"])
        for k in ("half_width_m", "stripes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


PRESETS = {
    "short": SceneConfig(),
    # padded HDMapNet-size raster (400x200 -> 448x256 as W x H)
    "long": SceneConfig(grid=GridSpec(256, 448), half_width_m=(4.0, 12.0), max_dividers=4),
}


def preset(name: str, **overrides) -> SceneConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def _centerline(rng, cfg: SceneConfig, hw: float):
    g = cfg.grid
    x0, x1 = g.x_range
    y0, y1 = g.y_range
    xm = 0.5 * (x0 + x1)
    span = 0.5 * (x1 - x0)
    heading = np.tan(np.deg2rad(rng.uniform(-cfg.max_heading_deg, cfg.max_heading_deg)))
    curv = rng.uniform(-cfg.max_curvature, cfg.max_curvature)
    # keep both boundaries inside the raster with a one-meter margin
    sway = abs(heading) * span + abs(curv) * span ** 2
    room = 0.5 * (y1 - y0) - hw - sway - 1.0
    yc = 0.5 * (y0 + y1) + (rng.uniform(-room, room) if room > 0 else 0.0)
    # extend past the raster so offset curves still cover it; clipped later
    xs = np.linspace(x0 - 2.0, x1 + 2.0, max(int((x1 - x0 + 4.0) / 0.25), 8) + 1)
    ys = yc + heading * (xs - xm) + curv * (xs - xm) ** 2
    dy = heading + 2 * curv * (xs - xm)
    tangent = np.stack([np.ones_like(dy), dy], axis=1)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    return np.stack([xs, ys], axis=1), tangent, normal


def _scene_polylines(rng, cfg: SceneConfig):
    g = cfg.grid
    hw = rng.uniform(*cfg.half_width_m)
    hw = min(hw, 0.5 * (g.y_range[1] - g.y_range[0]) - 1.5)
    center, tangent, normal = _centerline(rng, cfg, hw)
    lines = []
    for side in (-1.0, 1.0):
        lines.append((BOUNDARY, center + side * hw * normal))
    n_div = int(rng.integers(cfg.min_dividers, cfg.max_dividers + 1))
    for i in range(n_div):
        off = -hw + (i + 1) * 2 * hw / (n_div + 1)
        lines.append((DIVIDER, center + off * normal))

    n_stripes = 0
    if rng.random() < cfg.p_ped:
        n_stripes = int(rng.integers(cfg.stripes[0], cfg.stripes[1] + 1))
        pitch = (cfg.stripe_width_px + cfg.stripe_gap_px) * g.resolution
        extent = (n_stripes - 1) * pitch
        x0, x1 = g.x_range
        margin = 0.5 * extent + 2 * g.resolution * cfg.stripe_width_px
        lo, hi = x0 + margin, x1 - margin
        xc = rng.uniform(lo, hi) if hi > lo else 0.5 * (x0 + x1)
        for k in range(n_stripes):
            xk = xc - 0.5 * extent + k * pitch
            j = int(np.argmin(np.abs(center[:, 0] - xk)))
            # stripe spans between the boundaries, pulled in by the boundary stroke
            inset = hw - 0.5 * cfg.boundary_width_px * g.resolution - g.resolution
            a = center[j] - inset * normal[j]
            b = center[j] + inset * normal[j]
            lines.append((PED_CROSSING, np.stack([a, b])))
    return lines, n_stripes


def render_polylines(lines, cfg: SceneConfig) -> tuple[SemanticMap, PolylineSet]:
    """Rasterize ``(class_id, points)`` pairs; later entries overwrite earlier ones."""
    g = cfg.grid
    h, w = g.shape
    semantic = np.zeros((NUM_CLASSES, h, w), np.uint8)
    instance = np.zeros((h, w), np.int64)
    direction = np.zeros((h, w), np.uint8)
    kept = []
    for cls, pts in lines:
        pieces = clip_polyline_x(pts, *g.x_range)
        for piece in pieces:
            if len(piece) < 2:
                continue
            radius = cfg.stroke_width(cls) * g.resolution / 2
            dist, seg = segment_distances(piece, g, max_dist=radius + g.resolution)
            mask = dist <= radius + 1e-9
            if not mask.any():
                continue
            kept.append((cls, piece))
            d = np.diff(piece, axis=0)
            bins = angle_to_bin(np.arctan2(d[:, 1], d[:, 0]), NUM_DIRECTIONS)
            semantic[cls][mask] = 1
            instance[mask] = len(kept)
            direction[mask] = bins[seg[mask]]

    # drop instances that were fully overwritten and relabel contiguously
    present = np.unique(instance)
    present = present[present > 0]
    remap = np.zeros(len(kept) + 1, np.int64)
    remap[present] = np.arange(1, len(present) + 1)
    instance = remap[instance]
    polys = PolylineSet(Polyline(cls, 1.0, pts) for i, (cls, pts) in enumerate(kept, 1)
                        if i in set(present.tolist()))
    return SemanticMap(semantic, instance, direction, g), polys


def generate_scene(seed: int, scene_config: SceneConfig | None = None) -> MapSample:
    """Draw one synthetic scene and its corrupted observation.

    Args:
      seed: non-negative integer; the output is a pure function of
        ``(seed, scene_config)``.
      scene_config: generator parameters, defaults to the ``short`` preset.

    Returns:
      A :class:`MapSample` whose ``meta`` holds the vector ground truth under
      ``"polylines"`` (ordered by instance ID) and the stripe count.
    """
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")
    cfg = scene_config or SceneConfig()
    rng = np.random.default_rng(seed)
    lines, n_stripes = _scene_polylines(rng, cfg)
    gt, polys = render_polylines(lines, cfg)
    obs = corrupt(gt.semantic, cfg.corruption, seed)
    meta = {"n_stripes": n_stripes, "polylines": polys.to_json()}
    return MapSample(gt, obs, int(seed), meta)
