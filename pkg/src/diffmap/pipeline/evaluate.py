"""Evaluation runs over directories of predictions and ground truth."""

from __future__ import annotations

import os
from pathlib import Path

from diffmap.evalkit import (
    default_intervals, format_table, merge_stats, sample_stats, summarize, write_report,
)
from diffmap.errors import ConfigError, FormatError
from diffmap.mapforge.io import is_sample_dir, load_sample


def sample_ids(directory) -> list[str]:
    """Sorted names of the sample subdirectories of ``directory``."""
    d = Path(directory)
    if not d.is_dir():
        return []
    return sorted(name for name in os.listdir(d) if is_sample_dir(d / name))


class MissingSamplesError(FormatError):
    """Prediction and ground-truth directories disagree on sample IDs."""

    def __init__(self, missing, extra=()):
        self.missing = list(missing)
        self.extra = list(extra)
        parts = []
        if self.missing:
            parts.append("missing predictions for: " + ", ".join(self.missing))
        if self.extra:
            parts.append("predictions without ground truth: " + ", ".join(self.extra))
        super().__init__("; ".join(parts), field="samples")


def fit_intervals(cuts, grid) -> list[float]:
    """Clamp cut points to the grid's x range and drop the resulting empty intervals.

    Lets one cut list (say 0, 30, 60, 90 m) serve rasters of any extent.
    """
    x0, x1 = grid.x_range
    out = []
    for v in sorted(float(c) for c in cuts):
        v = min(max(v, x0), x1)
        if not out or v > out[-1]:
            out.append(v)
    if len(out) < 2:
        raise ConfigError(f"intervals {list(cuts)} do not overlap the x range {grid.x_range}")
    return out


def evaluate(pred_dir, gt_dir, intervals=None, out_path=None, csv_path=None, widths=(3, 3, 3)):
    """Aggregate per-class, per-interval metrics over all samples.

    Predictions are stored in the sample format with the predicted map in
    place of ground truth and the predicted polylines (with confidences) in
    ``meta["polylines"]``. Ground-truth polylines come from the generator
    metadata when present, otherwise they are traced from the instance map.

    Args:
      pred_dir: directory of predicted samples.
      gt_dir: directory of ground-truth samples.
      intervals: x cut points in meters, clamped to the grid (see
        :func:`fit_intervals`); defaults to thirds of the x range.
      out_path: optional JSON report path.
      csv_path: optional CSV path.

    Returns:
      The report dict (see :func:`diffmap.evalkit.summarize`).
    """
    gt_ids, pred_ids = sample_ids(gt_dir), sample_ids(pred_dir)
    if not gt_ids:
        raise FormatError(f"no samples found in {gt_dir}", field="gt_dir")
    missing = [i for i in gt_ids if i not in pred_ids]
    extra = [i for i in pred_ids if i not in gt_ids]
    if missing or extra:
        raise MissingSamplesError(missing, extra)
    stats = []
    for sid in gt_ids:
        gt = load_sample(Path(gt_dir) / sid)
        pred = load_sample(Path(pred_dir) / sid)
        cuts = default_intervals(gt.gt.grid) if intervals is None else fit_intervals(intervals, gt.gt.grid)
        stats.append(sample_stats(pred.gt, gt.gt, cuts, pred.polylines, gt.polylines, widths))
    report = summarize(merge_stats(stats))
    report["n_samples"] = len(gt_ids)
    if out_path is not None:
        write_report(report, out_path, csv_path)
    return report


__all__ = ["MissingSamplesError", "evaluate", "fit_intervals", "format_table", "sample_ids"]
