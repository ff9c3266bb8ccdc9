"""Two-stage training: VQ-VAE on ground-truth maps, then the conditional diffusion model.

Every step draws its batch and noise from generators keyed on
``(seed, step)``, so a run resumed from a checkpoint continues exactly as an
uninterrupted one would.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from diffmap.diffcore import diffusion_loss, q_sample
from diffmap.errors import ConfigError, DivergenceError
from diffmap.instancing import (
    DiscriminativeConfig, cross_entropy_loss, direction_loss, discriminative_loss,
)
from diffmap.pipeline.config import TrainConfig, derive_seed, flush_denormals, torch_generator
from diffmap.pipeline.models import (
    DiffMapModel, check_compatible, load_checkpoint, save_checkpoint, save_diffmap, stack_samples,
)
from diffmap.vq import VQVAE, VqConfig, vqvae_loss

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: object
    losses: list = field(default_factory=list)
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def _batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, step, 0))
    if batch_size >= n:
        return rng.permutation(n)
    return rng.choice(n, size=batch_size, replace=False)


def _make_optimizer(params, cfg: TrainConfig):
    return torch.optim.AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def _check_finite(value: float, step: int, parts: dict):
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        raise DivergenceError(f"non-finite loss at step {step} ({detail})")


def _clip(params, max_norm):
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


# ---------------------------------------------------------------------------
# stage 1


def train_vqvae(samples, cfg: TrainConfig, vq_cfg: VqConfig = VqConfig(), out=None,
                resume=None, stop_at: int | None = None) -> TrainResult:
    """Fit the VQ-VAE to ground-truth rasters (observations are not used).

    Args:
      samples: list of :class:`MapSample`.
      cfg: stage hyperparameters.
      vq_cfg: architecture; ignored when resuming.
      out: checkpoint path written at the end (and at ``stop_at``).
      resume: checkpoint path to continue from.
      stop_at: stop after this many total steps (for resumable partial runs).
    """
    data = stack_samples(samples)
    x_all = data["gt"]
    torch.manual_seed(derive_seed(cfg.seed, 1))
    start, losses = 0, []
    if resume is not None:
        ckpt = load_checkpoint(resume, "vqvae")
        vq_cfg = VqConfig.from_dict(ckpt["vq_config"])
        model = VQVAE(vq_cfg)
        model.load_state_dict(ckpt["model"])
        opt = _make_optimizer(model.parameters(), cfg)
        opt.load_state_dict(ckpt["optimizer"])
        start, losses = ckpt["step"], list(ckpt["losses"])
    else:
        model = VQVAE(vq_cfg)
        opt = _make_optimizer(model.parameters(), cfg)
    h, w = x_all.shape[-2:]
    if h % vq_cfg.factor or w % vq_cfg.factor:
        raise ConfigError(f"padded grid {h}x{w} not divisible by factor {vq_cfg.factor}")
    model.train()
    if not bool(model.codebook.initialized):
        with torch.no_grad():
            model.codebook.init_from(model.encode(x_all), torch_generator(cfg.seed, 2))

    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    with flush_denormals():
        for step in range(start, end):
            idx = _batch_indices(len(x_all), cfg.batch_size, cfg.seed, step)
            x = x_all[torch.as_tensor(idx)]
            _set_lr(opt, cfg.lr_at(step))
            x_hat, z_e, z_q, _ = model(x)
            total, recon, vq, commit = vqvae_loss(x, x_hat, z_e, z_q, vq_cfg.beta)
            value = total.item()
            _check_finite(value, step, {"recon": recon.item(), "vq": vq.item(), "commit": commit.item()})
            opt.zero_grad(set_to_none=True)
            total.backward()
            _clip(model.parameters(), cfg.grad_clip)
            opt.step()
            losses.append(value)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("vqvae step %d loss %.5f recon %.5f vq %.5f commit %.5f",
                         step, value, recon.item(), vq.item(), commit.item())
    model.eval()
    result = TrainResult(model, losses)
    if out is not None:
        result.checkpoint = save_checkpoint(out, "vqvae", {
            "vq_config": vq_cfg.to_dict(), "train_config": cfg.to_dict(),
            "model": model.state_dict(), "optimizer": opt.state_dict(),
            "step": end, "losses": losses,
        })
    return result


# ---------------------------------------------------------------------------
# stage 2


@torch.no_grad()
def encode_latents(vq: VQVAE, gt: torch.Tensor, chunk: int = 16) -> torch.Tensor:
    """Quantized latents of ground-truth rasters under the frozen VQ."""
    vq.eval()
    out = []
    for s in range(0, len(gt), chunk):
        z_q, _ = vq.quantize(vq.encode(gt[s:s + chunk]))
        out.append(z_q)
    return torch.cat(out)


def auxiliary_losses(head_out, gt, instance, direction, disc_cfg=DiscriminativeConfig()):
    return {
        "ce": cross_entropy_loss(head_out.sem_logits, gt),
        "disc": discriminative_loss(head_out.embedding, instance, disc_cfg),
        "dir": direction_loss(head_out.dir_logits, direction, instance),
    }


def diffusion_step_losses(model: DiffMapModel, z0, obs, gt, instance, direction, t, eps,
                          aux_to_latent: bool = False):
    """Forward pass of one training step; returns the individual loss terms.

    With ``aux_to_latent`` off, the heads on the diffusion features train on
    ``z_hat`` but their gradient stops there, so the denoiser only sees the
    two-branch diffusion loss. Letting it through drags ``z_hat`` off the
    latents the frozen decoder understands and stalls the denoiser.
    """
    z_t = q_sample(z0, t, eps, model.schedule)
    bev, base_feat = model.baseline(obs)
    eps_hat, z_hat = model.denoiser(z_t, torch.as_tensor(t), bev)
    losses = {"diff": diffusion_loss(z_hat, z0, eps_hat, eps)}
    # semantic features decoded from the clean-latent branch feed the heads
    feat = model.vq.decode_features((z_hat if aux_to_latent else z_hat.detach()) / model.latent_scale)
    dm = auxiliary_losses(model.heads(feat), gt, instance, direction)
    base = auxiliary_losses(model.base_heads(base_feat), gt, instance, direction)
    for k in dm:
        losses[k] = dm[k] + base[k]
    return losses, (eps_hat, z_hat)


def total_loss(losses, cfg: TrainConfig):
    return (cfg.w_diff * losses["diff"] + cfg.w_ce * losses["ce"]
            + cfg.w_disc * losses["disc"] + cfg.w_dir * losses["dir"])


def train_diffusion(samples, vq: VQVAE, cfg: TrainConfig, baseline_cfg=None, denoiser_cfg=None,
                    head_cfg=None, schedule=None, out=None, resume=None,
                    stop_at: int | None = None, on_step=None) -> TrainResult:
    """Train baseline, denoiser and heads jointly with the VQ frozen.

    Each step encodes ground truth to ``z0``, noises it at a uniformly drawn
    step, predicts both branches conditioned on the baseline's BEV features
    of the observation and adds the auxiliary head losses of both the
    diffusion features and the baseline features.

    Args:
      on_step: optional ``callback(step, model, losses)`` run after backward
        and before the optimizer update (used for gradient spot checks).
    """
    data = stack_samples(samples)
    torch.manual_seed(derive_seed(cfg.seed, 3))
    for p in vq.parameters():
        p.requires_grad_(False)
    vq.eval()
    z_raw = encode_latents(vq, data["gt"])

    start, losses_log, history = 0, [], []
    if resume is not None:
        ckpt = load_checkpoint(resume, "diffmap")
        model = DiffMapModel.from_state(ckpt)
        model.vq = vq
        opt = _make_optimizer(list(model.trainable_parameters()), cfg)
        opt.load_state_dict(ckpt["optimizer"])
        start, losses_log, history = ckpt["step"], list(ckpt["losses"]), list(ckpt["history"])
    else:
        scale = 1.0 / max(float(z_raw.std()), 1e-6)
        model = DiffMapModel.build(vq, baseline_cfg, denoiser_cfg, head_cfg, schedule, scale)
        opt = _make_optimizer(list(model.trainable_parameters()), cfg)
    check_compatible(vq.cfg, model.baseline.cfg, model.denoiser.cfg, model.heads.cfg,
                     model.schedule, data["gt"].shape[-2:])
    z_all = z_raw * model.latent_scale
    for name in ("baseline", "denoiser", "heads", "base_heads"):
        model.modules()[name].train()

    T = model.schedule.T
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    with flush_denormals():
        for step in range(start, end):
            idx = _batch_indices(len(z_all), cfg.batch_size, cfg.seed, step)
            tidx = torch.as_tensor(idx)
            gen = torch_generator(cfg.seed, step, 1)
            t = torch.randint(1, T + 1, (len(idx),), generator=gen).numpy()
            eps = torch.randn(z_all[tidx].shape, generator=gen)
            _set_lr(opt, cfg.lr_at(step))
            losses, _ = diffusion_step_losses(
                model, z_all[tidx], data["obs"][tidx], data["gt"][tidx],
                data["instance"][idx], data["direction"][idx], t, eps, cfg.aux_to_latent)
            total = total_loss(losses, cfg)
            value = total.item()
            parts = {k: v.item() for k, v in losses.items()}
            _check_finite(value, step, parts)
            opt.zero_grad(set_to_none=True)
            total.backward()
            if on_step is not None:
                on_step(step, model, losses)
            _clip(list(model.trainable_parameters()), cfg.grad_clip)
            opt.step()
            losses_log.append(value)
            history.append(parts)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("diffusion step %d loss %.5f %s", step, value,
                         " ".join(f"{k} {v:.4f}" for k, v in parts.items()))
    model.eval()
    result = TrainResult(model, losses_log, history)
    if out is not None:
        result.checkpoint = save_diffmap(out, model, {
            "train_config": cfg.to_dict(), "optimizer": opt.state_dict(),
            "step": end, "losses": losses_log, "history": history,
        })
    return result
