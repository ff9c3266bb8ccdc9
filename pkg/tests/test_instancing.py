import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from skimage.morphology import skeletonize

from diffmap.errors import ContractError
from diffmap.instancing import (
    DiscriminativeConfig, HeadConfig, Heads, VectorizeConfig, cluster_instances,
    cross_entropy_loss, dbscan, direction_loss, discriminative_loss, douglas_peucker,
    semantic_target, trace_polylines,
)
from diffmap.mapforge import GridSpec, generate_scene, preset, rasterize_polyline


def brute_dbscan(pts, radius, min_points):
    """Textbook DBSCAN with explicit pairwise distances and a FIFO queue."""
    n = len(pts)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    nb = [np.flatnonzero(d[i] <= radius) for i in range(n)]
    core = np.array([len(x) >= min_points for x in nb])
    labels = np.full(n, -1)
    c = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = c
        queue = [i]
        while queue:
            j = queue.pop(0)
            if not core[j]:
                continue
            for k in nb[j]:
                if labels[k] == -1:
                    labels[k] = c
                    queue.append(k)
        c += 1
    return labels


def brute_dp(pts, tol):
    """Recursive Douglas-Peucker reference."""
    if len(pts) < 3:
        return list(range(len(pts)))

    def rec(i, j):
        a, b = pts[i], pts[j]
        best, arg = -1.0, None
        for k in range(i + 1, j):
            ab = b - a
            t = 0.0 if not ab.any() else min(max(((pts[k] - a) @ ab) / (ab @ ab), 0.0), 1.0)
            dist = float(np.linalg.norm(pts[k] - (a + t * ab)))
            if dist > best:
                best, arg = dist, k
        if arg is None or best <= tol:
            return [i]
        return rec(i, arg) + rec(arg, j)

    return rec(0, len(pts) - 1) + [len(pts) - 1]


# ---------------------------------------------------------------------------
# heads


def test_heads_shapes():
    h = Heads().eval()
    out = h(torch.zeros(2, 16, 12, 10))
    assert out.sem_logits.shape == (2, 4, 12, 10)
    assert out.embedding.shape == (2, 8, 12, 10)
    assert out.dir_logits.shape == (2, 37, 12, 10)
    with pytest.raises(ContractError):
        h(torch.zeros(2, 15, 12, 10))


def test_heads_deterministic():
    h = Heads().eval()
    x = torch.randn(1, 16, 5, 5)
    a, b = h(x), h(x)
    assert torch.equal(a.sem_logits, b.sem_logits) and torch.equal(a.embedding, b.embedding)


def test_heads_finite_difference():
    torch.manual_seed(0)
    h = Heads(HeadConfig(feat_channels=3, hidden=4, embed_dim=2)).double()
    x = torch.randn(1, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    w = [torch.randn(1, c, 3, 3, dtype=torch.float64) for c in (4, 2, 37)]

    def f(v):
        o = h(v)
        return (o.sem_logits * w[0]).sum() + (o.embedding * w[1]).sum() + (o.dir_logits * w[2]).sum()

    assert torch.autograd.gradcheck(f, (x,), eps=1e-6, atol=1e-7, rtol=1e-3)


# ---------------------------------------------------------------------------
# losses


def test_semantic_target_priority():
    s = np.zeros((1, 3, 2, 2), np.uint8)
    s[0, 0, 0, 0] = 1
    s[0, 0, 0, 1] = s[0, 1, 0, 1] = 1
    s[0, :, 1, 1] = 1
    assert semantic_target(s)[0].tolist() == [[1, 2], [0, 3]]


def test_ce_perfect_and_uniform():
    s = np.zeros((1, 3, 4, 4), np.uint8)
    s[0, 1, :2] = 1
    target = semantic_target(s)
    perfect = torch.nn.functional.one_hot(target, 4).permute(0, 3, 1, 2).float() * 200
    assert cross_entropy_loss(perfect, s).item() < 1e-30
    assert cross_entropy_loss(torch.zeros(1, 4, 4, 4), s).item() == pytest.approx(math.log(4))


def test_ce_reference():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 4, 5, 6))
    s = (rng.random((2, 3, 5, 6)) > 0.7).astype(np.uint8)
    target = semantic_target(s).numpy()
    total = 0.0
    for b in range(2):
        for r in range(5):
            for c in range(6):
                z = logits[b, :, r, c]
                total += np.log(np.exp(z).sum()) - z[target[b, r, c]]
    assert cross_entropy_loss(torch.tensor(logits), s).item() == pytest.approx(total / 60, rel=1e-12)
    with pytest.raises(ContractError):
        cross_entropy_loss(torch.zeros(2, 4, 5, 5), s)


def test_disc_single_instance_zero():
    emb = torch.zeros(4, 3, 3)
    inst = np.ones((3, 3), int)
    assert discriminative_loss(emb, inst).item() == 0.0


def test_disc_two_points_hand():
    emb = torch.zeros(2, 1, 2)
    emb[0, 0, 1] = 1.0
    inst = np.array([[1, 2]])
    cfg = DiscriminativeConfig(delta_v=0.0, delta_d=1.0, w_var=1.0, w_dist=1.0, w_reg=0.0)
    assert discriminative_loss(emb, inst, cfg).item() == pytest.approx(1.0)


def test_disc_no_instances():
    emb = torch.randn(8, 4, 4, requires_grad=True)
    loss = discriminative_loss(emb, np.zeros((4, 4), int))
    assert loss.item() == 0.0
    loss.backward()
    assert torch.equal(emb.grad, torch.zeros_like(emb))


def disc_reference(emb, inst, cfg):
    ids = [i for i in np.unique(inst) if i > 0]
    mus, lv = [], 0.0
    for i in ids:
        x = emb[:, inst == i].T
        mu = x.mean(0)
        mus.append(mu)
        lv += np.mean(np.maximum(np.linalg.norm(x - mu, axis=1) - cfg.delta_v, 0) ** 2)
    n = len(ids)
    ld = 0.0
    for a in range(n):
        for b in range(n):
            if a != b:
                ld += max(2 * cfg.delta_d - np.linalg.norm(mus[a] - mus[b]), 0) ** 2
    ld = ld / (n * (n - 1)) if n > 1 else 0.0
    lr = np.mean([np.linalg.norm(m) for m in mus])
    return cfg.w_var * lv / n + cfg.w_dist * ld + cfg.w_reg * lr


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n_inst=st.integers(1, 4))
def test_disc_reference(seed, n_inst):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(3, 6, 6)) * 2
    inst = rng.integers(0, n_inst + 1, size=(6, 6))
    inst[0, :n_inst] = np.arange(1, n_inst + 1)  # every ID present
    cfg = DiscriminativeConfig()
    got = discriminative_loss(torch.tensor(emb), inst, cfg).item()
    assert got == pytest.approx(disc_reference(emb, inst, cfg), rel=1e-9, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_disc_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    emb = torch.tensor(rng.normal(size=(3, 5, 5)))
    inst = rng.integers(0, 4, size=(5, 5))
    cfg = DiscriminativeConfig(w_reg=0.0)
    moved = emb + torch.tensor(shift, dtype=torch.float64)[:, None, None]
    assert discriminative_loss(moved, inst, cfg).item() == pytest.approx(
        discriminative_loss(emb, inst, cfg).item(), rel=1e-7, abs=1e-9)


def test_direction_loss_cases():
    d = np.zeros((1, 3, 3), int)
    d[0, 1] = [4, 5, 6]
    perfect = torch.nn.functional.one_hot(torch.tensor(d), 37).permute(0, 3, 1, 2).double() * 200
    assert direction_loss(perfect, d).item() < 1e-30
    assert direction_loss(torch.randn(1, 37, 3, 3), np.zeros((1, 3, 3), int)).item() == 0.0


def test_direction_loss_reference():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(37, 4, 4))
    d = rng.integers(1, 37, size=(4, 4))
    inst = (rng.random((4, 4)) > 0.5).astype(int)
    vals = [np.log(np.exp(logits[:, r, c]).sum()) - logits[d[r, c], r, c]
            for r in range(4) for c in range(4) if inst[r, c]]
    got = direction_loss(torch.tensor(logits), d, inst).item()
    assert got == pytest.approx(np.mean(vals), rel=1e-12)


# ---------------------------------------------------------------------------
# clustering


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(0, 60), radius=st.floats(0.1, 2.0),
       m=st.integers(1, 5))
def test_dbscan_matches_bruteforce(seed, n, radius, m):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 12, size=(n, 2)) / 4.0  # lattice points make exact-radius ties common
    assert np.array_equal(dbscan(pts, radius, m), brute_dbscan(pts, radius, m))


def test_dbscan_collapsed_points():
    labels = dbscan(np.zeros((5000, 8)), 1.0, 3)
    assert (labels == 0).all()


def test_cluster_two_components():
    sem = np.zeros((3, 6, 10), np.uint8)
    sem[0, 1, 1:4] = 1
    sem[0, 4, 5:9] = 1
    emb = np.zeros((2, 6, 10))
    emb[0, 4, 5:9] = 10.0
    out = cluster_instances(sem, emb)
    assert set(np.unique(out)) == {0, 1, 2}
    assert len(np.unique(out[1, 1:4])) == 1 and len(np.unique(out[4, 5:9])) == 1


def test_cluster_splits_one_component_by_embedding():
    sem = np.zeros((3, 4, 12), np.uint8)
    sem[0, 1:3, :] = 1
    emb = np.zeros((2, 4, 12))
    emb[0, :, 6:] = 5.0  # right half far from left half
    out = cluster_instances(sem, emb, VectorizeConfig(cluster_radius=1.5))
    # oracle: single linkage at the radius is exactly "same half"
    assert np.unique(out[1:3, :6]).size == 1 and np.unique(out[1:3, 6:]).size == 1
    assert out[1, 0] != out[1, 11] and set(np.unique(out)) == {0, 1, 2}


def test_cluster_empty():
    assert not cluster_instances(np.zeros((3, 5, 5)), np.zeros((8, 5, 5))).any()


def test_cluster_noise_falls_back_to_components():
    sem = np.zeros((3, 5, 5), np.uint8)
    sem[1, 0, 0] = sem[1, 4, 4] = 1
    emb = np.zeros((2, 5, 5))
    emb[0, 4, 4] = 9.0
    out = cluster_instances(sem, emb, VectorizeConfig(min_points=3))
    assert out[0, 0] != out[4, 4] and out[0, 0] > 0 and out[4, 4] > 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_cluster_ids_contiguous_and_inside_mask(seed):
    rng = np.random.default_rng(seed)
    sem = (rng.random((3, 8, 8)) > 0.7).astype(np.uint8)
    emb = rng.normal(size=(4, 8, 8)) * 2
    out = cluster_instances(sem, emb)
    ids = np.unique(out[out > 0])
    assert np.array_equal(ids, np.arange(1, len(ids) + 1))
    assert not (out > 0)[~sem.any(0)].any()
    assert (out > 0)[sem.any(0)].all()


# ---------------------------------------------------------------------------
# vectorization


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(0, 25), tol=st.floats(0.0, 2.0))
def test_douglas_peucker_reference(seed, n, tol):
    pts = np.random.default_rng(seed).integers(-6, 7, size=(n, 2)) / 2.0
    assert np.array_equal(douglas_peucker(pts, tol), pts[brute_dp(pts, tol)])


def test_straight_line_trace():
    grid = GridSpec(9, 30, 0.2)
    inst = np.zeros((9, 30), int)
    inst[4, 5:25] = 1
    polys = trace_polylines(inst, None, grid)
    assert len(polys) == 1 and len(polys[0].points) == 2
    assert polys[0].length() == pytest.approx(19 * 0.2)
    assert np.allclose(sorted(polys[0].points[:, 0]), [0.2 * 5.5, 0.2 * 24.5])


def test_single_pixel_trace():
    grid = GridSpec(5, 5, 0.5)
    inst = np.zeros((5, 5), int)
    inst[2, 3] = 1
    polys = trace_polylines(inst, None, grid)
    assert polys[0].points.tolist() == grid.to_meters([[2, 3]]).tolist()


def test_l_shape_keeps_corner():
    grid = GridSpec(20, 20, 0.1)
    inst = np.zeros((20, 20), int)
    inst[2, 2:15] = 1
    inst[2:15, 14] = 1
    # the skeleton may shave the corner pixel; the tolerance sits between that
    # shaving (under one pixel) and the corner's deviation from the chord
    polys = trace_polylines(inst, None, grid, VectorizeConfig(dp_tolerance_m=0.2))
    pts = polys[0].points
    assert len(pts) == 3
    assert np.linalg.norm(pts[1] - grid.to_meters([[2, 14]])[0]) <= 0.1 * math.sqrt(2) + 1e-12


def test_direction_orders_walk():
    grid = GridSpec(5, 12, 0.5)
    inst = np.zeros((5, 12), int)
    inst[2, 1:11] = 1
    # direction bin pointing toward -x: endpoints are chosen from the scan, walking follows skeleton
    polys = trace_polylines(inst, np.zeros((37, 5, 12)), grid)
    assert len(polys[0].points) == 2


def test_confidence_and_class():
    grid = GridSpec(6, 6, 0.5)
    inst = np.zeros((6, 6), int)
    inst[1, 1:5] = 1
    sem = np.zeros((3, 6, 6), np.uint8)
    sem[2][inst > 0] = 1
    probs = np.zeros((4, 6, 6))
    probs[0] = 0.25
    probs[3] = 0.75
    p = trace_polylines(inst, None, grid, sem_mask=sem, sem_probs=probs)[0]
    assert p.class_id == 2 and p.confidence == pytest.approx(0.75)


@pytest.mark.parametrize("seed", range(6))
def test_trace_points_near_skeleton(seed):
    s = generate_scene(seed, preset("short"))
    for iid in range(1, int(s.gt.instance.max()) + 1):
        mask = s.gt.instance == iid
        skel = np.argwhere(skeletonize(mask))
        for poly in trace_polylines(np.where(mask, 1, 0), None, s.gt.grid,
                                    VectorizeConfig(dp_tolerance_m=0.0)):
            rc = s.gt.grid.to_pixel(poly.points)
            d = np.sqrt(((rc[:, None] - skel[None]) ** 2).sum(-1)).min(1)
            assert d.max() <= 1.0


@pytest.mark.parametrize("seed", range(6))
def test_trace_raster_roundtrip(seed):
    cfg = preset("short")
    s = generate_scene(seed, cfg)
    grid = s.gt.grid
    classes = s.gt.instance_classes()
    for iid, cls in classes.items():
        mask = s.gt.instance == iid
        if mask.sum() < 10:
            continue
        lab, _ = ndimage.label(mask, structure=np.ones((3, 3)))
        if lab.max() > 1:  # a clipped instance split in two; tracing covers one piece each
            continue
        poly = trace_polylines(mask.astype(int), None, grid)[0]
        back = rasterize_polyline(poly.points, cfg.stroke_width(cls), grid) > 0
        inter = (back & mask).sum()
        assert inter / (back | mask).sum() >= 0.8, (seed, iid)
