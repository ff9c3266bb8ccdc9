"""Map metrics: IoU, Chamfer distance, dual-gated instance AP, interval evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from diffmap.errors import ContractError
from diffmap.mapforge.geometry import clip_polyline_x
from diffmap.mapforge.raster import rasterize_polyline
from diffmap.mapforge.types import CLASS_NAMES, GridSpec, Polyline, PolylineSet, SemanticMap

IOU_THRESHOLD = 0.1
CD_THRESHOLD = 1.0
DENSIFY_SPACING = 0.1
RECALL_LEVELS = 10


def iou(m1, m2) -> float:
    a = np.asarray(m1).astype(bool)
    b = np.asarray(m2).astype(bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def densify(points, spacing: float = DENSIFY_SPACING) -> np.ndarray:
    """Insert evenly spaced points so consecutive points are at most ``spacing`` apart."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return pts.copy()
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(int(math.ceil(np.linalg.norm(b - a) / spacing)), 1)
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.vstack(out)


def chamfer_dir(c1, c2) -> float:
    """Mean over points of ``c1`` of the distance to the nearest point of ``c2``."""
    a = np.asarray(c1, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(c2, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("chamfer distance needs non-empty point sets")
    d, _ = cKDTree(b).query(a, k=1)
    return float(np.mean(d))


def chamfer(c1, c2) -> float:
    return chamfer_dir(c1, c2) + chamfer_dir(c2, c1)


@dataclass
class MatchResult:
    confidences: np.ndarray
    is_tp: np.ndarray
    matched_gt: list  # gt index or None per prediction
    n_gt: int
    tp_cd: list = field(default_factory=list)  # chamfer distance of each TP

    @classmethod
    def empty(cls, n_gt=0):
        return cls(np.zeros(0), np.zeros(0, bool), [], n_gt)

    def merge(self, other: "MatchResult") -> "MatchResult":
        # gt indices lose meaning across samples; keep only TP flags
        return MatchResult(
            np.concatenate([self.confidences, other.confidences]),
            np.concatenate([self.is_tp, other.is_tp]),
            self.matched_gt + other.matched_gt, self.n_gt + other.n_gt,
            self.tp_cd + other.tp_cd)


def greedy_match(conf, iou_mat, cd_mat, iou_thr=IOU_THRESHOLD, cd_thr=CD_THRESHOLD) -> MatchResult:
    """Confidence-ordered greedy assignment under the IoU and Chamfer gates.

    Each prediction (in descending confidence, ties by input order) takes the
    still-unmatched ground truth with the highest IoU among those with
    ``IoU > iou_thr`` and ``CD < cd_thr``; lower index wins IoU ties.
    """
    conf = np.asarray(conf, dtype=np.float64)
    iou_mat = np.asarray(iou_mat, dtype=np.float64)
    cd_mat = np.asarray(cd_mat, dtype=np.float64)
    if iou_mat.ndim != 2 or iou_mat.shape != cd_mat.shape or iou_mat.shape[0] != len(conf):
        raise ContractError(f"need matching (n_pred, n_gt) matrices, got {iou_mat.shape} and {cd_mat.shape}")
    n_gt = iou_mat.shape[1]
    taken = np.zeros(n_gt, bool)
    is_tp = np.zeros(len(conf), bool)
    matched = [None] * len(conf)
    tp_cd = []
    for i in np.argsort(-conf, kind="stable"):
        ok = (iou_mat[i] > iou_thr) & (cd_mat[i] < cd_thr) & ~taken
        if not ok.any():
            continue
        j = int(np.argmax(np.where(ok, iou_mat[i], -np.inf)))
        taken[j] = True
        is_tp[i] = True
        matched[i] = j
        tp_cd.append(float(cd_mat[i, j]))
    return MatchResult(conf, is_tp, matched, n_gt, tp_cd)


def instance_masks(polys: PolylineSet, grid: GridSpec, widths) -> list[np.ndarray]:
    """Rasterize each polyline at its class stroke width."""
    return [rasterize_polyline(p.points, widths[p.class_id], grid) for p in polys]


def match_instances(preds: PolylineSet, gts: PolylineSet, grid: GridSpec, widths=(3, 3, 3),
                    iou_thr=IOU_THRESHOLD, cd_thr=CD_THRESHOLD, pred_masks=None, gt_masks=None,
                    region=None) -> MatchResult:
    """Match predictions to ground truth of the same class.

    Args:
      preds, gts: polylines in meters.
      grid: raster used for instance IoU.
      widths: per-class stroke width (px) for rasterizing instances.
      pred_masks, gt_masks: precomputed masks, otherwise rasterized here.
      region: optional boolean H×W mask every instance mask is restricted to.
    """
    if pred_masks is None:
        pred_masks = instance_masks(preds, grid, widths)
    if gt_masks is None:
        gt_masks = instance_masks(gts, grid, widths)
    if region is not None:
        pred_masks = [m & region for m in pred_masks]
        gt_masks = [m & region for m in gt_masks]
    n, m = len(preds), len(gts)
    iou_mat = np.zeros((n, m))
    cd_mat = np.full((n, m), np.inf)
    dense_p = [densify(p.points) for p in preds]
    dense_g = [densify(g.points) for g in gts]
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if p.class_id != g.class_id:
                continue
            iou_mat[i, j] = iou(pred_masks[i], gt_masks[j])
            if iou_mat[i, j] > iou_thr:
                cd_mat[i, j] = chamfer(dense_p[i], dense_g[j])
    return greedy_match([p.confidence for p in preds], iou_mat, cd_mat, iou_thr, cd_thr)


def average_precision(match: MatchResult) -> float:
    """Mean over recall levels 0.1..1.0 of the interpolated precision."""
    n_pred = len(match.confidences)
    if match.n_gt == 0:
        return 1.0 if n_pred == 0 else 0.0
    if n_pred == 0:
        return 0.0
    order = np.argsort(-np.asarray(match.confidences, dtype=np.float64), kind="stable")
    tp = np.cumsum(np.asarray(match.is_tp)[order]).tolist()
    # rational arithmetic keeps the result independent of summation order
    precision = [Fraction(t, k) for k, t in enumerate(tp, start=1)]
    total = Fraction(0)
    for level in range(1, RECALL_LEVELS + 1):
        # recall >= level/10 in exact integer arithmetic
        reach = [p for p, t in zip(precision, tp) if t * RECALL_LEVELS >= level * match.n_gt]
        if reach:
            total += max(reach)
    return float(total / RECALL_LEVELS)


# ---------------------------------------------------------------------------
# interval evaluation


@dataclass
class ClassStats:
    inter: int = 0
    union: int = 0
    match: MatchResult = field(default_factory=MatchResult.empty)
    n_pred: int = 0
    gt_pixels: int = 0
    pred_pixels: int = 0

    def merge(self, o: "ClassStats") -> "ClassStats":
        return ClassStats(self.inter + o.inter, self.union + o.union, self.match.merge(o.match),
                          self.n_pred + o.n_pred, self.gt_pixels + o.gt_pixels,
                          self.pred_pixels + o.pred_pixels)

    @property
    def defined(self) -> bool:
        return self.union > 0 or self.match.n_gt > 0 or self.n_pred > 0

    def metrics(self) -> dict:
        if not self.defined:
            return {"iou": None, "cd": None, "ap": None, "defined": False,
                    "n_gt": 0, "n_pred": 0}
        return {
            "iou": self.inter / self.union if self.union else 1.0,
            "cd": float(np.mean(self.match.tp_cd)) if self.match.tp_cd else None,
            "ap": average_precision(self.match),
            "defined": True,
            "n_gt": self.match.n_gt,
            "n_pred": self.n_pred,
        }


def interval_label(lo, hi) -> str:
    return f"{lo:g}-{hi:g}"


def _column_mask(grid: GridSpec, lo, hi, last: bool):
    xs = grid.x_range[0] + (np.arange(grid.width_px) + 0.5) * grid.resolution
    cols = (xs >= lo) & ((xs <= hi) if last else (xs < hi))
    return np.broadcast_to(cols, grid.shape)


def _clip_set(polys: PolylineSet, lo, hi) -> PolylineSet:
    out = PolylineSet()
    for p in polys:
        for piece in clip_polyline_x(p.points, lo, hi):
            out.append(Polyline(p.class_id, p.confidence, piece))
    return out


def map_stats(pred: SemanticMap, gt: SemanticMap, pred_polys: PolylineSet, gt_polys: PolylineSet,
              interval=None, last=True, widths=(3, 3, 3), iou_thr=IOU_THRESHOLD,
              cd_thr=CD_THRESHOLD) -> list[ClassStats]:
    """Per-class raw statistics of one sample, optionally restricted to an x-interval."""
    if pred.grid.shape != gt.grid.shape:
        raise ContractError(f"grid mismatch {pred.grid.shape} vs {gt.grid.shape}")
    grid = gt.grid
    region = None
    if interval is not None:
        lo, hi = interval
        region = _column_mask(grid, lo, hi, last)
        pred_polys = _clip_set(pred_polys, lo, hi)
        gt_polys = _clip_set(gt_polys, lo, hi)
    stats = []
    for c in range(gt.semantic.shape[0]):
        pm = pred.semantic[c] > 0
        gm = gt.semantic[c] > 0
        if region is not None:
            pm, gm = pm & region, gm & region
        pc, gc = pred_polys.of_class(c), gt_polys.of_class(c)
        match = match_instances(pc, gc, grid, widths, iou_thr, cd_thr, region=region)
        stats.append(ClassStats(int(np.count_nonzero(pm & gm)), int(np.count_nonzero(pm | gm)),
                                match, len(pc), int(gm.sum()), int(pm.sum())))
    return stats


def check_intervals(intervals, grid: GridSpec):
    cuts = [float(v) for v in intervals]
    if len(cuts) < 2:
        raise ContractError("need at least two interval cuts")
    if any(b <= a for a, b in zip(cuts[:-1], cuts[1:])):
        raise ContractError(f"interval cuts must be strictly increasing: {cuts}")
    tol = 1e-9
    if cuts[0] < grid.x_range[0] - tol or cuts[-1] > grid.x_range[1] + tol:
        raise ContractError(f"cuts {cuts} exceed grid x_range {grid.x_range}")
    return cuts


def default_intervals(grid: GridSpec, parts: int = 3) -> list[float]:
    """Equal split of the x range (0-30/30-60/60-90 on a 90 m raster)."""
    x0, x1 = grid.x_range
    return [x0 + (x1 - x0) * i / parts for i in range(parts + 1)]


def sample_stats(pred, gt, intervals, pred_polys=None, gt_polys=None, widths=(3, 3, 3),
                 iou_thr=IOU_THRESHOLD, cd_thr=CD_THRESHOLD) -> dict:
    """Raw stats for ``"all"`` plus each interval label."""
    from diffmap.instancing import trace_polylines  # local: avoids torch import at module load

    if pred_polys is None:
        pred_polys = trace_polylines(pred.instance, None, pred.grid, sem_mask=pred.semantic)
    if gt_polys is None:
        gt_polys = trace_polylines(gt.instance, None, gt.grid, sem_mask=gt.semantic)
    out = {"all": map_stats(pred, gt, pred_polys, gt_polys, None, True, widths, iou_thr, cd_thr)}
    if intervals is not None:
        cuts = check_intervals(intervals, gt.grid)
        for k, (lo, hi) in enumerate(zip(cuts[:-1], cuts[1:])):
            out[interval_label(lo, hi)] = map_stats(
                pred, gt, pred_polys, gt_polys, (lo, hi), k == len(cuts) - 2, widths, iou_thr, cd_thr)
    return out


def merge_stats(items) -> dict:
    items = list(items)
    merged = {}
    for key in items[0]:
        per_class = items[0][key]
        for other in items[1:]:
            per_class = [a.merge(b) for a, b in zip(per_class, other[key])]
        merged[key] = per_class
    return merged


def summarize(stats: dict, class_names=CLASS_NAMES) -> dict:
    """Turn merged stats into the report schema."""
    per_class = {name: {} for name in class_names}
    means = {}
    for key, cls_stats in stats.items():
        rows = [s.metrics() for s in cls_stats]
        for name, row in zip(class_names, rows):
            per_class[name][key] = row
        means[key] = {}
        for metric in ("iou", "cd", "ap"):
            vals = [r[metric] for r in rows if r[metric] is not None]
            means[key][metric] = float(np.mean(vals)) if vals else None
    return {"schema_version": 1, "intervals": list(stats), "per_class": per_class, "means": means}


def interval_eval(pred: SemanticMap, gt: SemanticMap, intervals, pred_polys=None, gt_polys=None,
                  widths=(3, 3, 3), iou_thr=IOU_THRESHOLD, cd_thr=CD_THRESHOLD) -> dict:
    """Per-interval, per-class IoU / CD / AP of one prediction against ground truth.

    Masks are clipped to pixel columns whose centers fall in ``[lo, hi)``
    (the last interval is closed); polylines are clipped geometrically at the
    cuts. Interval/class cells without any ground truth or prediction are
    reported with ``defined=False`` and null metrics.
    """
    return summarize(sample_stats(pred, gt, intervals, pred_polys, gt_polys, widths, iou_thr, cd_thr))


def write_report(report: dict, path, csv_path=None):
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "interval", "iou", "cd", "ap"])
            for cls, rows in report["per_class"].items():
                for key, row in rows.items():
                    w.writerow([cls, key, row["iou"], row["cd"], row["ap"]])
    return path


def format_table(report: dict) -> str:
    """Plain-text table: one row per class, IoU/CD/AP columns per interval."""
    keys = report["intervals"]

    def fmt(v, pct):
        if v is None:
            return "   -  "
        return f"{100 * v:6.1f}" if pct else f"{v:6.2f}"

    lines = []
    for metric, pct in (("iou", True), ("cd", False), ("ap", True)):
        lines.append(f"{metric.upper():<14}" + "".join(f"{k:>12}" for k in keys))
        for cls, rows in report["per_class"].items():
            lines.append(f"{cls:<14}" + "".join(f"{fmt(rows[k][metric], pct):>12}" for k in keys))
        lines.append(f"{'mean':<14}" + "".join(f"{fmt(report['means'][k][metric], pct):>12}" for k in keys))
        lines.append("")
    return "\n".join(lines)
