"""On-disk sample format.

A sample directory holds ``manifest.json`` plus raw little-endian payloads::

    semantic.u8.bin      C x H x W  uint8
    instance.u16.bin     H x W      uint16
    direction.u8.bin     H x W      uint8
    observation.f32.bin  C x H x W  float32

A dataset is a directory of sample subdirectories with a ``dataset.json``
index listing them in order.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from diffmap.errors import FormatError
from diffmap.mapforge.types import CLASS_NAMES, NUM_DIRECTIONS, GridSpec, MapSample, SemanticMap

SCHEMA_VERSION = 1

PAYLOADS = {
    # field: (filename, dtype)
    "semantic": ("semantic.u8.bin", "<u1"),
    "instance": ("instance.u16.bin", "<u2"),
    "direction": ("direction.u8.bin", "<u1"),
    "observation": ("observation.f32.bin", "<f4"),
}


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_sample(sample: MapSample, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {
        "semantic": sample.gt.semantic,
        "instance": sample.gt.instance,
        "direction": sample.gt.direction,
        "observation": sample.observation,
    }
    shapes = {}
    for name, (fname, dtype) in PAYLOADS.items():
        a = np.ascontiguousarray(arrays[name], dtype=dtype)
        (d / fname).write_bytes(a.tobytes(order="C"))
        shapes[name] = list(a.shape)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "grid": sample.gt.grid.to_dict(),
        "class_names": list(CLASS_NAMES),
        "num_directions": NUM_DIRECTIONS,
        "dtypes": {k: v[1] for k, v in PAYLOADS.items()},
        "files": {k: v[0] for k, v in PAYLOADS.items()},
        "shapes": shapes,
        "scene_seed": int(sample.scene_seed),
        "meta": sample.meta,
    }
    _write_json(d / "manifest.json", manifest)
    return d


def _require(manifest, key):
    if key not in manifest:
        raise FormatError("missing from manifest", field=key)
    return manifest[key]


def load_sample(directory) -> MapSample:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"no manifest in {d}", field="manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable JSON ({exc})", field="manifest.json") from exc
    version = _require(manifest, "schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError(f"unsupported version {version}", field="schema_version")
    try:
        grid = GridSpec.from_dict(_require(manifest, "grid"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(str(exc), field="grid") from exc
    shapes = _require(manifest, "shapes")
    c = len(_require(manifest, "class_names"))
    expected = {
        "semantic": [c, *grid.shape], "observation": [c, *grid.shape],
        "instance": list(grid.shape), "direction": list(grid.shape),
    }
    arrays = {}
    for name, (fname, dtype) in PAYLOADS.items():
        shape = shapes.get(name)
        if shape is None:
            raise FormatError("missing shape", field=f"shapes.{name}")
        if list(shape) != expected[name]:
            raise FormatError(f"shape {shape} inconsistent with grid (expected {expected[name]})",
                              field=f"shapes.{name}")
        declared = manifest.get("dtypes", {}).get(name, dtype)
        if declared != dtype:
            raise FormatError(f"dtype {declared} != {dtype}", field=f"dtypes.{name}")
        path = d / fname
        if not path.is_file():
            raise FormatError(f"payload {fname} missing", field=name)
        raw = path.read_bytes()
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if len(raw) != n:
            raise FormatError(f"payload has {len(raw)} bytes, shape needs {n}", field=name)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))
    gt = SemanticMap(arrays["semantic"], arrays["instance"], arrays["direction"], grid)
    return MapSample(gt, arrays["observation"], int(manifest.get("scene_seed", 0)),
                     manifest.get("meta", {}))


def save_dataset(samples, directory, extra: dict | None = None) -> Path:
    """Write samples as ``DIR/<id>/`` subdirectories plus ``dataset.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        sid = f"{s.scene_seed:06d}"
        save_sample(s, d / sid)
        ids.append(sid)
    index = {"schema_version": SCHEMA_VERSION, "samples": ids}
    if extra:
        index.update(extra)
    _write_json(d / "dataset.json", index)
    return d


def dataset_ids(directory) -> list[str]:
    d = Path(directory)
    p = d / "dataset.json"
    if not p.is_file():
        raise FormatError(f"no dataset index in {d}", field="dataset.json")
    try:
        index = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable JSON ({exc})", field="dataset.json") from exc
    ids = index.get("samples")
    if not isinstance(ids, list):
        raise FormatError("missing sample list", field="samples")
    return [str(i) for i in ids]


def dataset_info(directory) -> dict:
    return json.loads((Path(directory) / "dataset.json").read_text())


def load_dataset(directory) -> list[MapSample]:
    d = Path(directory)
    return [load_sample(d / sid) for sid in dataset_ids(d)]


def is_sample_dir(path) -> bool:
    return os.path.isfile(os.path.join(path, "manifest.json"))
