import json
import math

import numpy as np
import pytest
import torch
from torch import nn

from diffmap.bevbase import BaselineConfig
from diffmap.denoiser import DenoiserConfig
from diffmap.errors import ConfigError, DivergenceError
from diffmap.instancing import HeadConfig
from diffmap.mapforge import (
    GridSpec, MapSample, Polyline, PolylineSet, SemanticMap, rasterize_polyline, save_dataset,
)
from diffmap.pipeline import (
    DiffMapModel, MissingSamplesError, TrainConfig, derive_seed, evaluate, fit_intervals,
    load_diffmap, load_vqvae, recipe, render_comparison, resolve_seed, sample_map,
    train_diffusion, train_vqvae,
)
from diffmap.pipeline.config import flush_denormals, load_json_config, torch_generator
from diffmap.pipeline.infer import baseline_map, run_chain
from diffmap.pipeline.models import stack_samples
from diffmap.pipeline.train import diffusion_step_losses, encode_latents, total_loss
from diffmap.pipeline.viz import BACKGROUND, GAP, PALETTE, legend_boxes
from diffmap.vq import VqConfig

TINY_VQ = VqConfig(num_codes=32, widths=(8, 8, 8, 8))
TINY_BASE = BaselineConfig(channels=8, width=8)
TINY_DEN = DenoiserConfig(latent_dim=8, cond_in=8, cond_dim=8, widths=(16, 16), heads=2, time_dim=16)
TINY_HEAD = HeadConfig(hidden=8)


def vq_cfg(steps=6, **kw):
    return recipe("vqvae", steps=steps, batch_size=2, log_every=0, **kw)


def diff_cfg(steps=6, **kw):
    return recipe("diffusion", steps=steps, batch_size=2, log_every=0, **kw)


def tiny_diffusion(scenes, vq, steps=4, **kw):
    return train_diffusion(scenes, vq, diff_cfg(steps), TINY_BASE, TINY_DEN, TINY_HEAD, **kw)


@pytest.fixture(scope="module")
def tiny_vq(scenes):
    return train_vqvae(scenes, vq_cfg(4), TINY_VQ).model


@pytest.fixture(scope="module")
def tiny_model(scenes, tiny_vq):
    return tiny_diffusion(scenes, tiny_vq).model


def state_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# configuration helpers


def test_train_config_validation_and_roundtrip():
    c = recipe("diffusion")
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})
    for kw in ({"stage": "x"}, {"steps": 0}, {"lr": 0.0}, {"lr_schedule": "x"}, {"grad_clip": -1}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_lr_schedules():
    c = TrainConfig(lr=1.0, steps=100, lr_schedule="multistep", lr_gamma=0.5, lr_milestones=(0.5, 0.9))
    assert [c.lr_at(s) for s in (0, 49, 50, 89, 90)] == [1.0, 1.0, 0.5, 0.5, 0.25]
    e = TrainConfig(lr=1.0, lr_gamma=0.5, lr_every=10)
    assert e.lr_at(9) == 1.0 and e.lr_at(25) == 0.25
    cos = TrainConfig(lr=2.0, steps=10, lr_schedule="cosine")
    assert cos.lr_at(0) == 2.0 and cos.lr_at(5) == pytest.approx(1.0) and cos.lr_at(10) == 0.0


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv("DIFFMAP_SEED", raising=False)
    assert resolve_seed(None, 7) == 7
    monkeypatch.setenv("DIFFMAP_SEED", "11")
    assert resolve_seed(None) == 11 and resolve_seed(3) == 3
    monkeypatch.setenv("DIFFMAP_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None)


def test_derived_seeds():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert len({derive_seed(0, s) for s in range(1000)}) == 1000
    a = torch.randn(3, generator=torch_generator(5, 1))
    assert torch.equal(a, torch.randn(3, generator=torch_generator(5, 1)))


def test_json_config_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_json_config(p)


def test_flush_denormals_is_scoped():
    with flush_denormals():
        assert torch.tensor([1e-40]).item() == 0.0
    assert torch.tensor([1e-40]).item() != 0.0


# ---------------------------------------------------------------------------
# VQ-VAE training


def test_vq_training_deterministic(scenes):
    a = train_vqvae(scenes, vq_cfg(), TINY_VQ)
    b = train_vqvae(scenes, vq_cfg(), TINY_VQ)
    assert a.losses == b.losses
    assert state_equal(a.model.state_dict(), b.model.state_dict())


def test_vq_resume_is_bitwise(scenes, tmp_path):
    full = train_vqvae(scenes, vq_cfg(), TINY_VQ)
    train_vqvae(scenes, vq_cfg(), TINY_VQ, out=tmp_path / "half.pt", stop_at=3)
    resumed = train_vqvae(scenes, vq_cfg(), TINY_VQ, out=tmp_path / "full.pt", resume=tmp_path / "half.pt")
    assert resumed.losses == full.losses
    assert state_equal(resumed.model.state_dict(), full.model.state_dict())
    loaded, ckpt = load_vqvae(tmp_path / "full.pt")
    assert ckpt["step"] == 6 and state_equal(loaded.state_dict(), full.model.state_dict())


def test_vq_divergence_reported(scenes):
    # an infinite step poisons the weights, so the next loss is the first non-finite one
    with pytest.raises(DivergenceError, match="step 1 .*recon=nan"):
        train_vqvae(scenes, vq_cfg(2, lr=float("inf")), TINY_VQ)


def test_vq_losses_finite(scenes):
    res = train_vqvae(scenes, vq_cfg(5), TINY_VQ)
    assert all(math.isfinite(v) for v in res.losses)


# ---------------------------------------------------------------------------
# diffusion training


def test_diffusion_deterministic(scenes, tiny_vq):
    a = tiny_diffusion(scenes, tiny_vq)
    b = tiny_diffusion(scenes, tiny_vq)
    assert a.losses == b.losses
    for k, m in a.model.modules().items():
        assert state_equal(m.state_dict(), b.model.modules()[k].state_dict()), k


def test_diffusion_resume_is_bitwise(scenes, tiny_vq, tmp_path):
    full = tiny_diffusion(scenes, tiny_vq)
    tiny_diffusion(scenes, tiny_vq, out=tmp_path / "half.pt", stop_at=2)
    resumed = tiny_diffusion(scenes, tiny_vq, out=tmp_path / "full.pt", resume=tmp_path / "half.pt")
    assert resumed.losses == full.losses
    loaded, ckpt = load_diffmap(tmp_path / "full.pt")
    assert ckpt["step"] == 4 and len(ckpt["history"]) == 4
    for k, m in full.model.modules().items():
        assert state_equal(m.state_dict(), loaded.modules()[k].state_dict()), k


def test_diffusion_keeps_vq_frozen(scenes, tiny_vq):
    before = {k: v.clone() for k, v in tiny_vq.state_dict().items()}
    tiny_diffusion(scenes, tiny_vq, steps=2)
    assert state_equal(before, tiny_vq.state_dict())


def test_incompatible_configs(scenes, tiny_vq):
    with pytest.raises(ConfigError):
        train_diffusion(scenes, tiny_vq, diff_cfg(1), TINY_BASE,
                        DenoiserConfig(latent_dim=4, cond_in=8, cond_dim=8, widths=(16, 16), heads=2))
    deep = DenoiserConfig(latent_dim=8, cond_in=8, cond_dim=8, widths=(8, 8, 8, 8, 8), heads=2)
    with pytest.raises(ConfigError):  # 64 px columns / (8 * 2^4) is fractional
        train_diffusion(scenes, tiny_vq, diff_cfg(1), TINY_BASE, deep)


def test_gradient_masks_every_step(scenes, tiny_vq):
    """Per step: auxiliary losses (read from z_hat) never reach the noise branch."""
    seen = []

    def spot_check(step, model, losses):
        for name in ("dec_eps", "dec_z"):
            grads = [p.grad for p in getattr(model.denoiser, name).parameters()]
            assert all(g is not None and torch.isfinite(g).all() for g in grads)
        seen.append(step)

    res = tiny_diffusion(scenes, tiny_vq, steps=3, on_step=spot_check)
    assert seen == [0, 1, 2]

    model = res.model
    data = stack_samples(scenes[:2])
    z0 = encode_latents(model.vq, data["gt"]) * model.latent_scale
    t = np.array([10, 700])
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(0))
    losses, _ = diffusion_step_losses(model, z0, data["obs"], data["gt"], data["instance"],
                                      data["direction"], t, eps)
    aux = losses["ce"] + losses["disc"] + losses["dir"]
    eps_params = list(model.denoiser.dec_eps.parameters())
    grads = torch.autograd.grad(aux, eps_params, allow_unused=True, retain_graph=True)
    assert all(g is None or not g.any() for g in grads)
    assert total_loss(losses, diff_cfg()).item() > 0


@pytest.mark.parametrize("through", [False, True])
def test_aux_gradient_routing(scenes, tiny_model, through):
    model = tiny_model
    data = stack_samples(scenes[:2])
    z0 = encode_latents(model.vq, data["gt"]) * model.latent_scale
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(1))
    losses, _ = diffusion_step_losses(model, z0, data["obs"], data["gt"], data["instance"],
                                      data["direction"], np.array([5, 900]), eps, aux_to_latent=through)
    aux = losses["ce"] + losses["disc"] + losses["dir"]

    def reached(params):
        grads = torch.autograd.grad(aux, list(params), allow_unused=True, retain_graph=True)
        return any(g is not None and g.any() for g in grads)

    assert reached(model.denoiser.dec_z.parameters()) == through
    assert not reached(model.denoiser.dec_eps.parameters())
    assert reached(model.heads.parameters()) and reached(model.baseline.parameters())


# ---------------------------------------------------------------------------
# sampling


def test_sample_deterministic(scenes, tiny_model):
    a = sample_map(scenes[0].observation, tiny_model, steps=3, n_samples=1, seed=4)
    b = sample_map(scenes[0].observation, tiny_model, steps=3, n_samples=1, seed=4)
    assert a.map == b.map and torch.equal(a.features, b.features)
    assert a.polylines.to_json() == b.polylines.to_json()


def test_sample_output_contract(scenes, tiny_model):
    s = scenes[1]
    p = sample_map(s.observation, tiny_model, steps=2, n_samples=2, grid=s.gt.grid)
    assert p.map.semantic.shape == s.gt.semantic.shape and p.map.grid == s.gt.grid
    assert p.heads.sem_logits.shape[1:] == s.gt.semantic.shape[1:]
    assert p.chain_features.shape[0] == 2
    inst = p.map.instance
    ids = np.unique(inst[inst > 0])
    assert np.array_equal(ids, np.arange(1, len(ids) + 1))
    assert not inst[~p.map.semantic.any(0)].any()


def test_sample_bad_arguments(scenes, tiny_model):
    with pytest.raises(ConfigError):
        sample_map(scenes[0].observation, tiny_model, steps=0)
    with pytest.raises(ConfigError):
        sample_map(scenes[0].observation, tiny_model, n_samples=0)
    with pytest.raises(ConfigError):
        sample_map(scenes[0].observation[:2], tiny_model, steps=1)


def test_three_samples_average_single_chains(scenes, tiny_model):
    obs = scenes[2].observation
    p = sample_map(obs, tiny_model, steps=3, n_samples=3, seed=9)
    x = torch.from_numpy(obs.astype(np.float32))[None]
    with torch.no_grad():
        B, _ = tiny_model.baseline(x)
        feats = []
        for chain in range(3):
            z = run_chain(tiny_model, B, (1, 8, 16, 8), 3, 0.0, torch_generator(9, chain))
            feats.append(tiny_model.vq.decode_latent(z / tiny_model.latent_scale)[0])
    assert torch.allclose(p.features, torch.stack(feats).mean(0), rtol=0, atol=1e-6)
    for k in range(3):
        assert torch.equal(p.chain_features[k], feats[k])


def test_latent_averaging_alternative(scenes, tiny_model):
    obs = scenes[2].observation
    p = sample_map(obs, tiny_model, steps=2, n_samples=2, seed=1, average="latents", snap=False)
    z = p.latents.mean(0, keepdim=True) / tiny_model.latent_scale
    with torch.no_grad():
        ref = tiny_model.vq.decode_latent(z, snap=False)[0]
    assert torch.equal(p.features, ref)
    with pytest.raises(ConfigError):
        sample_map(obs, tiny_model, steps=1, average="median")


class OracleDenoiser(nn.Module):
    """Test double that knows the clean latent and answers with the true noise."""

    def __init__(self, cfg, z0, schedule):
        super().__init__()
        self.cfg, self.z0, self.schedule = cfg, z0, schedule

    def forward(self, z_t, t, B):
        ab = self.schedule.ab(int(torch.as_tensor(t).reshape(-1)[0]))
        eps = (z_t - math.sqrt(ab) * self.z0) / math.sqrt(1 - ab)
        return eps, self.z0.clone()


def test_oracle_full_chain_recovers_gt(scenes, tiny_model):
    s = scenes[3]
    data = stack_samples([s])
    vq = tiny_model.vq
    z0 = encode_latents(vq, data["gt"]) * tiny_model.latent_scale
    oracle = DiffMapModel(vq, tiny_model.baseline, OracleDenoiser(tiny_model.denoiser.cfg, z0,
                                                                  tiny_model.schedule),
                          tiny_model.heads, tiny_model.base_heads, tiny_model.schedule,
                          tiny_model.latent_scale)
    p = sample_map(s.observation, oracle, steps=tiny_model.schedule.T, n_samples=1)
    assert (p.latents[0] - z0[0]).abs().max() < 1e-4
    with torch.no_grad():
        recon = (vq(data["gt"])[0] > 0)[0].numpy().astype(np.uint8)
    assert np.array_equal(p.map.semantic, recon)


def test_baseline_map_shape(scenes, tiny_model):
    m = baseline_map(scenes[0].observation, tiny_model)
    assert m.shape == scenes[0].gt.semantic.shape and set(np.unique(m)) <= {0, 1}


# ---------------------------------------------------------------------------
# evaluation runs


def _pred_sample(sample, semantic=None, polylines=None):
    sem = sample.gt.semantic if semantic is None else semantic
    pm = SemanticMap(sem, sample.gt.instance, sample.gt.direction, sample.gt.grid)
    polys = sample.polylines if polylines is None else polylines
    return MapSample(pm, sample.observation, sample.scene_seed, {"polylines": polys.to_json()})


def test_evaluate_identity(scenes, tmp_path):
    save_dataset(scenes, tmp_path / "gt")
    save_dataset([_pred_sample(s) for s in scenes], tmp_path / "pred")
    rep = evaluate(tmp_path / "pred", tmp_path / "gt", out_path=tmp_path / "r.json")
    assert rep["n_samples"] == 4
    for rows in rep["per_class"].values():
        assert rows["all"]["iou"] == 1.0 and rows["all"]["ap"] == 1.0 and rows["all"]["cd"] == 0.0
    assert json.loads((tmp_path / "r.json").read_text())["means"] == rep["means"]


def test_evaluate_missing_ids(scenes, tmp_path):
    save_dataset(scenes, tmp_path / "gt")
    (tmp_path / "pred").mkdir()
    with pytest.raises(MissingSamplesError) as err:
        evaluate(tmp_path / "pred", tmp_path / "gt")
    assert len(err.value.missing) == 4
    for sid in err.value.missing:
        assert sid in str(err.value)


def test_evaluate_hand_fixture(tmp_path):
    grid = GridSpec(20, 40, 0.25)  # x in [0, 10], y in [-2.5, 2.5]
    divider = np.array([[1.0, 0.0], [9.0, 0.0]])
    shifted = divider + [0.0, 0.25]
    ped = np.array([[5.0, -2.0], [5.0, 2.0]])

    def sample(lines, seed):
        sem = np.zeros((3, 20, 40), np.uint8)
        inst = np.zeros((20, 40), np.uint16)
        polys = PolylineSet()
        for k, (cls, pts) in enumerate(lines, start=1):
            m = rasterize_polyline(pts, 3, grid)
            sem[cls] |= m
            inst[m > 0] = k
            polys.append(Polyline(cls, 1.0, pts))
        return MapSample(SemanticMap(sem, inst, np.zeros_like(sem[0]), grid), sem.astype(np.float32),
                         seed, {"polylines": polys.to_json()})

    gts = [sample([(0, divider)], 0), sample([(1, ped)], 1)]
    preds = [sample([(0, shifted)], 0), sample([], 1)]
    save_dataset(gts, tmp_path / "gt")
    save_dataset(preds, tmp_path / "pred")
    rep = evaluate(tmp_path / "pred", tmp_path / "gt", intervals=[0, 5, 10])

    g, p = rasterize_polyline(divider, 3, grid) > 0, rasterize_polyline(shifted, 3, grid) > 0
    ped_px = int((rasterize_polyline(ped, 3, grid) > 0).sum())
    div = rep["per_class"]["divider"]["all"]
    assert div["iou"] == (g & p).sum() / (g | p).sum()
    assert div["cd"] == pytest.approx(0.5, abs=1e-9)  # parallel offset 0.25 m in both directions
    assert div["ap"] == 1.0
    ped_row = rep["per_class"]["ped_crossing"]["all"]
    assert ped_row["iou"] == 0.0 and ped_row["ap"] == 0.0 and ped_row["cd"] is None
    assert ped_px > 0 and rep["per_class"]["boundary"]["all"]["defined"] is False
    assert rep["intervals"] == ["all", "0-5", "5-10"]


def test_fit_intervals():
    grid = GridSpec(128, 64, 0.15)
    assert fit_intervals([0, 30, 60, 90], grid) == [0.0, 9.6]
    assert fit_intervals([0, 30, 60, 90], GridSpec(256, 448, 0.15)) == [0.0, 30.0, 60.0, 67.2]
    with pytest.raises(ConfigError):
        fit_intervals([20, 30], grid)


# ---------------------------------------------------------------------------
# figures


def test_empty_gt_render_is_background():
    grid = GridSpec(16, 16)
    empty = SemanticMap.empty(grid)
    img = np.asarray(render_comparison(MapSample(empty, np.zeros((3, 16, 16), np.float32), 0), scale=1))
    panel = img[GAP:GAP + 16, GAP + 3 * (16 + GAP):GAP + 3 * (16 + GAP) + 16]
    assert (panel == BACKGROUND).all()


def test_render_deterministic_bytes(scenes, tmp_path):
    s = scenes[0]
    a = render_comparison(s, s.gt, tmp_path / "a.png", baseline=s.gt.semantic)
    render_comparison(s, s.gt, tmp_path / "b.png", baseline=s.gt.semantic)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert a.size == ((s.gt.grid.width_px * 2 + GAP) * 4 + GAP, s.gt.grid.height_px * 2 + 2 * GAP + 18)


def test_legend_pixels_follow_class_order(scenes):
    s = scenes[0]
    img = np.asarray(render_comparison(s, s.gt, scale=1))
    top = GAP + s.gt.grid.height_px + GAP
    for name, (x0, y0, x1, y1) in zip(("divider", "ped_crossing", "boundary"), legend_boxes(top=top)):
        cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
        assert tuple(img[cy, cx]) == PALETTE[name]


def test_gt_panel_colors(scenes):
    s = scenes[0]
    img = np.asarray(render_comparison(s, None, scale=1))
    x0 = GAP + 3 * (s.gt.grid.width_px + GAP)
    panel = img[GAP:GAP + s.gt.grid.height_px, x0:x0 + s.gt.grid.width_px]
    r, c = np.argwhere(s.gt.semantic[2] > 0)[0]
    assert tuple(panel[r, c]) == PALETTE["boundary"]
    r, c = np.argwhere(~s.gt.semantic.any(0))[0]
    assert tuple(panel[r, c]) == BACKGROUND
