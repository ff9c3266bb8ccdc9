"""Core map data types: grid geometry, semantic maps, samples and polylines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from diffmap.errors import ConfigError, ContractError

CLASS_NAMES = ("divider", "ped_crossing", "boundary")
NUM_CLASSES = len(CLASS_NAMES)
NUM_DIRECTIONS = 36


@dataclass(frozen=True)
class GridSpec:
    """Raster geometry. Rows run along y, columns along x.

    Pixel ``(r, c)`` has its center at
    ``(x_range[0] + (c + 0.5) * resolution, y_range[0] + (r + 0.5) * resolution)``.
    """

    height_px: int
    width_px: int
    resolution: float = 0.15
    x_range: tuple[float, float] | None = None
    y_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.height_px <= 0 or self.width_px <= 0:
            raise ConfigError(f"grid size must be positive, got {self.height_px}x{self.width_px}")
        if not self.resolution > 0:
            raise ConfigError(f"resolution must be > 0, got {self.resolution}")
        # unspecified ranges start at x=0 and are centred on y=0
        if self.x_range is None:
            object.__setattr__(self, "x_range", (0.0, self.width_px * self.resolution))
        if self.y_range is None:
            half = self.height_px * self.resolution / 2
            object.__setattr__(self, "y_range", (-half, half))
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        for name, span, n in (("x_range", self.x_range, self.width_px),
                              ("y_range", self.y_range, self.height_px)):
            extent = span[1] - span[0]
            if abs(extent - n * self.resolution) > self.resolution + 1e-9:
                raise ConfigError(
                    f"{name} {span} does not match {n} px at {self.resolution} m/px")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    def pixel_centers(self):
        """Return ``(xs, ys)`` arrays of shape H×W with pixel-center coordinates."""
        xs = self.x_range[0] + (np.arange(self.width_px) + 0.5) * self.resolution
        ys = self.y_range[0] + (np.arange(self.height_px) + 0.5) * self.resolution
        return np.meshgrid(xs, ys)

    def to_pixel(self, points):
        """Map meter coordinates ``(N, 2)`` [x, y] to fractional (row, col)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        col = (pts[:, 0] - self.x_range[0]) / self.resolution - 0.5
        row = (pts[:, 1] - self.y_range[0]) / self.resolution - 0.5
        return np.stack([row, col], axis=1)

    def to_meters(self, rc):
        """Inverse of :meth:`to_pixel`."""
        rc = np.asarray(rc, dtype=np.float64).reshape(-1, 2)
        x = self.x_range[0] + (rc[:, 1] + 0.5) * self.resolution
        y = self.y_range[0] + (rc[:, 0] + 0.5) * self.resolution
        return np.stack([x, y], axis=1)

    def padded(self, height_px: int, width_px: int) -> "GridSpec":
        """Grid extended on the bottom/right to a larger pixel size."""
        return GridSpec(
            height_px, width_px, self.resolution,
            (self.x_range[0], self.x_range[0] + width_px * self.resolution),
            (self.y_range[0], self.y_range[0] + height_px * self.resolution),
        )

    def to_dict(self) -> dict:
        return {
            "height_px": self.height_px,
            "width_px": self.width_px,
            "resolution": self.resolution,
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["height_px"]), int(d["width_px"]), float(d["resolution"]),
                   tuple(d["x_range"]), tuple(d["y_range"]))


@dataclass
class SemanticMap:
    """Rasterized map: class masks, instance IDs and direction bins.

    ``semantic`` is uint8 (C, H, W); ``instance`` uint16 (H, W) with 0 as
    background; ``direction`` uint8 (H, W) with 0 as background and bins
    1..NUM_DIRECTIONS.
    """

    semantic: np.ndarray
    instance: np.ndarray
    direction: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        self.semantic = np.ascontiguousarray(self.semantic, dtype=np.uint8)
        self.instance = np.ascontiguousarray(self.instance, dtype=np.uint16)
        self.direction = np.ascontiguousarray(self.direction, dtype=np.uint8)
        hw = self.grid.shape
        if self.semantic.ndim != 3 or self.semantic.shape[1:] != hw:
            raise ContractError(f"semantic shape {self.semantic.shape} does not match grid {hw}")
        if self.instance.shape != hw or self.direction.shape != hw:
            raise ContractError("instance/direction shape does not match grid")

    @classmethod
    def empty(cls, grid: GridSpec, num_classes: int = NUM_CLASSES) -> "SemanticMap":
        h, w = grid.shape
        return cls(np.zeros((num_classes, h, w), np.uint8), np.zeros((h, w), np.uint16),
                   np.zeros((h, w), np.uint8), grid)

    @property
    def num_instances(self) -> int:
        return int(self.instance.max()) if self.instance.size else 0

    def instance_classes(self) -> dict[int, int]:
        """Majority class of each instance ID."""
        out = {}
        for iid in range(1, self.num_instances + 1):
            sel = self.instance == iid
            out[iid] = int(np.argmax(self.semantic[:, sel].sum(axis=1)))
        return out

    def __eq__(self, other):
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return (self.grid == other.grid
                and np.array_equal(self.semantic, other.semantic)
                and np.array_equal(self.instance, other.instance)
                and np.array_equal(self.direction, other.direction))


def validate_semantic_map(m: SemanticMap, num_directions: int = NUM_DIRECTIONS) -> list[str]:
    """Check SemanticMap invariants; returns a list of violations (empty when valid)."""
    problems = []
    if m.semantic.max(initial=0) > 1:
        problems.append("semantic mask not {0,1}-valued")
    fg = m.semantic.any(axis=0)
    if np.any((m.instance > 0) & ~fg):
        problems.append("instance pixel without semantic support")
    if np.any((m.direction > 0) & (m.instance == 0)):
        problems.append("direction pixel outside any instance")
    if m.direction.max(initial=0) > num_directions:
        problems.append("direction bin out of range")
    ids = np.unique(m.instance)
    ids = ids[ids > 0]
    if ids.size and not np.array_equal(ids, np.arange(1, ids.size + 1)):
        problems.append("instance IDs not contiguous from 1")
    return problems


@dataclass
class Polyline:
    class_id: int
    confidence: float
    points: np.ndarray  # (N, 2) meters, [x, y]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 1:
            raise ContractError("polyline needs at least one point")
        if self.class_id not in range(NUM_CLASSES):
            raise ContractError(f"class_id {self.class_id} out of range")
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")

    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


class PolylineSet(list):
    """List of :class:`Polyline` with JSON (de)serialization."""

    def to_json(self) -> list[dict]:
        return [
            {"class_id": int(p.class_id), "confidence": float(p.confidence),
             "points": [[float(x), float(y)] for x, y in p.points]}
            for p in self
        ]

    @classmethod
    def from_json(cls, items) -> "PolylineSet":
        return cls(Polyline(int(d["class_id"]), float(d["confidence"]), np.array(d["points"], float))
                   for d in items)

    def of_class(self, class_id: int) -> "PolylineSet":
        return PolylineSet(p for p in self if p.class_id == class_id)


@dataclass
class MapSample:
    gt: SemanticMap
    observation: np.ndarray
    scene_seed: int
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.observation = np.ascontiguousarray(self.observation, dtype=np.float32)
        if self.observation.shape != self.gt.semantic.shape:
            raise ContractError(
                f"observation shape {self.observation.shape} != gt {self.gt.semantic.shape}")
        if self.observation.size and (self.observation.min() < 0 or self.observation.max() > 1):
            raise ContractError("observation values outside [0, 1]")

    @property
    def polylines(self) -> PolylineSet | None:
        items = self.meta.get("polylines")
        return None if items is None else PolylineSet.from_json(items)

    def __eq__(self, other):
        if not isinstance(other, MapSample):
            return NotImplemented
        return (self.gt == other.gt and self.scene_seed == other.scene_seed
                and np.array_equal(self.observation, other.observation)
                and self.meta == other.meta)


def angle_to_bin(angle_rad, num_directions: int = NUM_DIRECTIONS):
    """Map tangent angles to direction bins 1..num_directions (bin 0 is background)."""
    a = np.mod(np.asarray(angle_rad, dtype=np.float64), 2 * math.pi)
    b = np.floor(a / (2 * math.pi / num_directions)).astype(np.int64)
    return np.clip(b, 0, num_directions - 1) + 1


def bin_to_angle(b, num_directions: int = NUM_DIRECTIONS):
    """Center angle (radians) of direction bin ``b`` (1-based)."""
    return (np.asarray(b, dtype=np.float64) - 0.5) * (2 * math.pi / num_directions)
