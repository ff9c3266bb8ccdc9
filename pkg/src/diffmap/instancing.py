"""Prediction heads, their auxiliary losses, and vectorization post-processing."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize
from torch import nn

from diffmap.errors import ContractError
from diffmap.mapforge.types import (
    NUM_CLASSES, NUM_DIRECTIONS, GridSpec, Polyline, PolylineSet, bin_to_angle,
)


@dataclass(frozen=True)
class HeadConfig:
    feat_channels: int = 16
    hidden: int = 32
    embed_dim: int = 8
    num_classes: int = NUM_CLASSES
    num_directions: int = NUM_DIRECTIONS

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class DiscriminativeConfig:
    delta_v: float = 0.5
    delta_d: float = 3.0
    w_var: float = 1.0
    w_dist: float = 1.0
    w_reg: float = 0.001


@dataclass(frozen=True)
class VectorizeConfig:
    cluster_radius: float = 1.5  # embedding-space neighborhood radius
    min_points: int = 3
    dp_tolerance_m: float = 0.05  # a third of a 0.15 m pixel keeps 3 px strokes registered
    sem_threshold: float = 0.5


@dataclass
class HeadOutputs:
    sem_logits: torch.Tensor  # (B, C_cls + 1, H, W), channel 0 is background
    embedding: torch.Tensor  # (B, E, H, W)
    dir_logits: torch.Tensor  # (B, N_dir + 1, H, W), channel 0 is background


def _mlp(cin, hidden, cout):
    return nn.Sequential(nn.Conv2d(cin, hidden, 1), nn.SiLU(), nn.Conv2d(hidden, cout, 1))


class Heads(nn.Module):
    """Per-pixel MLP heads for semantics, instance embedding and direction."""

    def __init__(self, cfg: HeadConfig = HeadConfig()):
        super().__init__()
        self.cfg = cfg
        self.sem = _mlp(cfg.feat_channels, cfg.hidden, cfg.num_classes + 1)
        self.embed = _mlp(cfg.feat_channels, cfg.hidden, cfg.embed_dim)
        self.dir = _mlp(cfg.feat_channels, cfg.hidden, cfg.num_directions + 1)

    def forward(self, feature_map: torch.Tensor) -> HeadOutputs:
        if feature_map.dim() != 4 or feature_map.shape[1] != self.cfg.feat_channels:
            raise ContractError(
                f"features must be (B, {self.cfg.feat_channels}, H, W), got {tuple(feature_map.shape)}")
        return HeadOutputs(self.sem(feature_map), self.embed(feature_map), self.dir(feature_map))


heads_forward = Heads.forward


def semantic_target(gt_semantic) -> torch.Tensor:
    """Per-pixel class index: 0 background, else ``class + 1`` with later classes winning overlaps."""
    s = torch.as_tensor(gt_semantic)
    target = torch.zeros(s.shape[:1] + s.shape[2:], dtype=torch.long)
    for c in range(s.shape[1]):
        target[s[:, c] > 0] = c + 1
    return target


def cross_entropy_loss(sem_logits, gt_semantic):
    """Mean per-pixel softmax cross-entropy against the priority-resolved class index."""
    target = semantic_target(gt_semantic)
    if sem_logits.shape[0] != target.shape[0] or sem_logits.shape[2:] != target.shape[1:]:
        raise ContractError(f"logits {tuple(sem_logits.shape)} vs gt {tuple(gt_semantic.shape)}")
    return F.cross_entropy(sem_logits, target)


def _empty_like(t):
    return t.sum() * 0.0


def discriminative_loss(embedding, instance_map, cfg: DiscriminativeConfig = DiscriminativeConfig()):
    """Variance / distance / regularization loss on per-pixel embeddings.

    Args:
      embedding: (E, H, W) or (B, E, H, W) tensor.
      instance_map: (H, W) or (B, H, W) integer IDs, 0 = background.
      cfg: margins and term weights.

    Returns:
      Scalar; batched inputs are averaged over samples. No instances gives 0.
    """
    emb = torch.as_tensor(embedding)
    inst = torch.as_tensor(np.asarray(instance_map, dtype=np.int64))
    if emb.dim() == 3:
        emb, inst = emb[None], inst[None]
    losses = [_disc_single(e, i, cfg) for e, i in zip(emb, inst)]
    return torch.stack(losses).mean()


def _disc_single(emb, inst, cfg):
    e = emb.shape[0]
    flat = emb.reshape(e, -1).t()
    labels = inst.reshape(-1)
    ids = torch.unique(labels)
    ids = ids[ids > 0]
    n = ids.numel()
    if n == 0:
        return _empty_like(emb)
    means, l_var = [], []
    for iid in ids:
        x = flat[labels == iid]
        mu = x.mean(dim=0)
        means.append(mu)
        d = torch.clamp(torch.linalg.vector_norm(x - mu, dim=1) - cfg.delta_v, min=0.0)
        l_var.append((d ** 2).mean())
    mu = torch.stack(means)
    l_var = torch.stack(l_var).mean()
    if n > 1:
        diff = mu[:, None, :] - mu[None, :, :]
        # safe norm: the diagonal is zero and excluded below
        dist = torch.sqrt((diff ** 2).sum(-1) + torch.eye(n, dtype=mu.dtype))
        hinge = torch.clamp(2 * cfg.delta_d - dist, min=0.0) ** 2
        off = ~torch.eye(n, dtype=torch.bool)
        l_dist = hinge[off].sum() / (n * (n - 1))
    else:
        l_dist = _empty_like(emb)
    l_reg = torch.linalg.vector_norm(mu, dim=1).mean()
    return cfg.w_var * l_var + cfg.w_dist * l_dist + cfg.w_reg * l_reg


def direction_loss(dir_logits, gt_direction, instance_map=None):
    """Direction-bin cross-entropy over instance pixels only; 0 when there are none."""
    target = torch.as_tensor(np.asarray(gt_direction, dtype=np.int64))
    if target.dim() == 2:
        target = target[None]
    if dir_logits.dim() == 3:
        dir_logits = dir_logits[None]
    if instance_map is None:
        mask = target > 0
    else:
        inst = torch.as_tensor(np.asarray(instance_map, dtype=np.int64))
        mask = (inst if inst.dim() == 3 else inst[None]) > 0
    if not mask.any():
        return _empty_like(dir_logits)
    logits = dir_logits.permute(0, 2, 3, 1)[mask]
    return F.cross_entropy(logits, target[mask])


# ---------------------------------------------------------------------------
# clustering


def dbscan(points: np.ndarray, radius: float, min_points: int) -> np.ndarray:
    """Density-based clustering; labels follow first discovery in input order, -1 is noise.

    Clusters are grown one at a time from the lowest-index unvisited core
    point, so a border point reachable from several clusters joins the one
    discovered first. Neighborhoods are closed balls that include the point
    itself. Each growth wave asks which unlabeled points lie within
    ``radius`` of the newest core points, which stays near-linear even when
    all points collapse onto one spot.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    core = cKDTree(pts).query_ball_point(pts, r=radius, return_length=True) >= min_points
    bound = np.nextafter(radius, np.inf)
    cluster = 0
    for i in np.flatnonzero(core):
        if labels[i] != -1:
            continue
        labels[i] = cluster
        frontier = np.array([i])
        while frontier.size:
            free = np.flatnonzero(labels == -1)
            if free.size == 0:
                break
            d, _ = cKDTree(pts[frontier]).query(pts[free], k=1, distance_upper_bound=bound)
            new = free[d <= radius]
            labels[new] = cluster
            frontier = new[core[new]]
        cluster += 1
    return labels


def cluster_instances(sem_mask, embedding, cfg: VectorizeConfig = VectorizeConfig()) -> np.ndarray:
    """Group foreground pixels into instances per class.

    Pixels of each class are clustered in embedding space (row-major scan
    order); pixels left as noise are grouped by spatial 8-connectivity.
    Class 0 instances are numbered first, IDs are contiguous from 1.

    Args:
      sem_mask: (C, H, W) binary masks.
      embedding: (E, H, W) array.
      cfg: clustering radius and minimum neighborhood size.
    """
    sem = np.asarray(sem_mask) > 0
    emb = np.asarray(embedding, dtype=np.float64)
    out = np.zeros(sem.shape[1:], dtype=np.int64)
    taken = np.zeros(sem.shape[1:], dtype=bool)
    next_id = 1
    for c in range(sem.shape[0]):
        mask = sem[c] & ~taken
        rows, cols = np.nonzero(mask)  # row-major
        if rows.size == 0:
            continue
        labels = dbscan(emb[:, rows, cols].T, cfg.cluster_radius, cfg.min_points)
        for lab in range(labels.max() + 1):
            sel = labels == lab
            out[rows[sel], cols[sel]] = next_id
            next_id += 1
        noise = np.zeros_like(mask)
        noise[rows[labels < 0], cols[labels < 0]] = True
        if noise.any():
            cc, n = ndimage.label(noise, structure=np.ones((3, 3)))
            for lab in range(1, n + 1):
                out[cc == lab] = next_id
                next_id += 1
        taken |= mask
    return out


# ---------------------------------------------------------------------------
# tracing


def douglas_peucker(points: np.ndarray, tol: float) -> np.ndarray:
    """Simplify an open polyline, keeping points deviating more than ``tol`` from the chord."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return pts.copy()
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        d = _dist_to_segment(pts[i + 1:j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > tol:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return pts[keep]


def _dist_to_segment(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(p - a, axis=1)
    t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _walk(skel: np.ndarray, dir_bins: np.ndarray | None) -> list[tuple[int, int]]:
    pix = set(zip(*np.nonzero(skel)))
    order = sorted(pix)

    def nbrs(p):
        return [(p[0] + dr, p[1] + dc) for dr, dc in _OFFSETS if (p[0] + dr, p[1] + dc) in pix]

    ends = [p for p in order if len(nbrs(p)) == 1]
    cur = ends[0] if ends else order[0]
    path = [cur]
    seen = {cur}
    while True:
        cand = [q for q in nbrs(cur) if q not in seen]
        if not cand:
            break
        b = 0 if dir_bins is None else int(dir_bins[cur])

        def key(q, b=b, cur=cur):
            dr, dc = q[0] - cur[0], q[1] - cur[1]
            step = np.hypot(dr, dc)
            align = 0.0
            if b > 0:
                ang = bin_to_angle(b)
                # columns follow x and rows follow y
                align = -(dc * np.cos(ang) + dr * np.sin(ang)) / step
            return (round(align, 9), step, q)

        cur = min(cand, key=key)
        path.append(cur)
        seen.add(cur)
    return path


def trace_polylines(instance_map, dir_logits, grid: GridSpec, cfg: VectorizeConfig = VectorizeConfig(),
                    sem_mask=None, sem_probs=None) -> PolylineSet:
    """Vectorize every instance into an ordered, simplified polyline.

    Args:
      instance_map: (H, W) integer IDs.
      dir_logits: (N_dir + 1, H, W) array or None; its per-pixel argmax
        breaks ties when the skeleton walk branches.
      grid: raster geometry used to convert pixels to meters.
      cfg: Douglas-Peucker tolerance (meters).
      sem_mask: (C, H, W) masks; each instance takes its majority class.
      sem_probs: (C + 1, H, W) softmax output; confidence is the mean
        foreground probability over the instance. Defaults to 1.0.
    """
    inst = np.asarray(instance_map)
    dir_bins = None if dir_logits is None else np.argmax(np.asarray(dir_logits), axis=0)
    out = PolylineSet()
    for iid in range(1, int(inst.max(initial=0)) + 1):
        mask = inst == iid
        if not mask.any():
            continue
        skel = skeletonize(mask)
        if not skel.any():
            skel = mask
        path = _walk(skel, dir_bins)
        pts = grid.to_meters(np.array(path, dtype=np.float64))
        pts = douglas_peucker(pts, cfg.dp_tolerance_m)
        cls = 0
        if sem_mask is not None:
            cls = int(np.argmax(np.asarray(sem_mask)[:, mask].sum(axis=1)))
        conf = 1.0
        if sem_probs is not None:
            conf = float(np.clip(1.0 - np.asarray(sem_probs)[0][mask].mean(), 0.0, 1.0))
        out.append(Polyline(cls, conf, pts))
    return out
