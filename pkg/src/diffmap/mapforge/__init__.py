"""Synthetic structured maps: generation, corruption, rasterization and storage."""

from diffmap.mapforge.corrupt import CorruptionConfig, corrupt
from diffmap.mapforge.generator import (
    BOUNDARY, DIVIDER, PED_CROSSING, PRESETS, SceneConfig, generate_scene, preset,
    render_polylines,
)
from diffmap.mapforge.geometry import clip_polyline_x, polyline_length
from diffmap.mapforge.io import (
    dataset_ids, load_dataset, load_sample, save_dataset, save_sample,
)
from diffmap.mapforge.raster import crop, pad_to_multiple, rasterize_polyline, segment_distances
from diffmap.mapforge.types import (
    CLASS_NAMES, NUM_CLASSES, NUM_DIRECTIONS, GridSpec, MapSample, Polyline, PolylineSet,
    SemanticMap, angle_to_bin, bin_to_angle, validate_semantic_map,
)

__all__ = [
    "BOUNDARY", "CLASS_NAMES", "DIVIDER", "NUM_CLASSES", "NUM_DIRECTIONS", "PED_CROSSING",
    "PRESETS", "CorruptionConfig", "GridSpec", "MapSample", "Polyline", "PolylineSet",
    "SceneConfig", "SemanticMap", "angle_to_bin", "bin_to_angle", "clip_polyline_x", "corrupt",
    "crop", "dataset_ids", "generate_scene", "load_dataset", "load_sample", "pad_to_multiple",
    "polyline_length", "preset", "rasterize_polyline", "render_polylines", "save_dataset",
    "save_sample", "segment_distances", "validate_semantic_map",
]
