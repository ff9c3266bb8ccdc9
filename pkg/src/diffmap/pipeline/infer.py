"""Reverse-diffusion inference: observation in, refined vector map out."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from diffmap.diffcore import sampler_step, timestep_subset
from diffmap.errors import ConfigError, ContractError
from diffmap.instancing import HeadOutputs, VectorizeConfig, cluster_instances, trace_polylines
from diffmap.mapforge.raster import pad_to_multiple
from diffmap.mapforge.types import GridSpec, PolylineSet, SemanticMap
from diffmap.pipeline.config import flush_denormals, torch_generator
from diffmap.pipeline.models import PAD_MULTIPLE, DiffMapModel


@dataclass
class Prediction:
    """Output of :func:`sample_map`, cropped back to the observation grid.

    ``features`` is the chain-averaged decoded feature map (F, H, W);
    ``chain_features`` keeps the per-chain maps (N, F, H, W).
    """

    map: SemanticMap
    polylines: PolylineSet
    heads: HeadOutputs
    features: torch.Tensor
    chain_features: torch.Tensor
    latents: torch.Tensor


def _as_batch(observation) -> torch.Tensor:
    obs = np.asarray(observation, dtype=np.float32)
    if obs.ndim != 3:
        raise ContractError(f"observation must be (C, H, W), got shape {obs.shape}")
    padded, _ = pad_to_multiple(obs, PAD_MULTIPLE)
    return torch.from_numpy(np.ascontiguousarray(padded))[None]


@torch.no_grad()
def run_chain(model: DiffMapModel, B: torch.Tensor, latent_shape, steps: int, eta: float,
              generator: torch.Generator, lam: float = 0.5) -> torch.Tensor:
    """One reverse chain from pure noise to a clean (scaled) latent."""
    ts = timestep_subset(model.schedule.T, steps)
    z = torch.randn(latent_shape, generator=generator)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps_hat, z_hat = model.denoiser(z, torch.tensor([t]), B)
        noise = torch.randn(latent_shape, generator=generator) if eta > 0 and t_prev > 0 else None
        z = sampler_step(z, z_hat, eps_hat, t, t_prev, eta, model.schedule, noise=noise, lam=lam)
    return z


@torch.no_grad()
def sample_map(observation, model: DiffMapModel, steps: int = 20, n_samples: int = 3,
               eta: float = 0.0, seed: int = 0, lam: float = 0.5, grid: GridSpec | None = None,
               vec_cfg: VectorizeConfig = VectorizeConfig(), snap: bool = True,
               average: str = "features") -> Prediction:
    """Refine one observation with the trained diffusion prior.

    The condition is computed once; ``n_samples`` chains start from noise
    seeded by ``(seed, chain)``, each final latent is decoded to semantic
    features, the features are averaged pixelwise, and both the VQ logit
    layer and the heads read the average. Semantics are binarized at 0.5 and
    instances come from embedding clustering plus skeleton tracing.

    Args:
      observation: (C, H, W) corrupted raster.
      model: trained bundle.
      steps: number of reverse steps (uniform stride over ``[T, 0]``).
      n_samples: independent chains to average.
      eta: sampler stochasticity in [0, 1].
      seed: base seed for the chains.
      lam: weight of the direct clean-latent estimate in the fused estimate.
      grid: geometry for the output; defaults to a grid of the input shape.
      vec_cfg: clustering and simplification settings.
      snap: snap final latents to the codebook before decoding.
      average: ``"features"`` averages the decoded feature maps of the chains;
        ``"latents"`` averages the final latents and decodes the mean once.
    """
    if steps < 1 or n_samples < 1:
        raise ConfigError(f"steps and n_samples must be >= 1, got {steps}, {n_samples}")
    if average not in ("features", "latents"):
        raise ConfigError(f"average must be 'features' or 'latents', got {average!r}")
    if steps > model.schedule.T:
        raise ConfigError(f"steps {steps} exceeds the schedule length {model.schedule.T}")
    model.eval()
    obs = _as_batch(observation)
    h, w = np.asarray(observation).shape[-2:]
    grid = grid or GridSpec(h, w)
    if grid.shape != (h, w):
        raise ContractError(f"observation {(h, w)} does not match grid {grid.shape}")
    f = model.vq.cfg.factor
    if obs.shape[1] != model.baseline.cfg.in_channels:
        raise ConfigError("observation channels do not match the checkpoint")
    B, _ = model.baseline(obs)
    latent_shape = (1, model.denoiser.cfg.latent_dim, obs.shape[-2] // f, obs.shape[-1] // f)

    latents, feats = [], []
    with flush_denormals():
        for chain in range(n_samples):
            z = run_chain(model, B, latent_shape, steps, eta, torch_generator(seed, chain), lam)
            latents.append(z[0])
            feats.append(model.vq.decode_latent(z / model.latent_scale, snap=snap)[0])
    chain_features = torch.stack(feats)
    if average == "features":
        mean_feat = chain_features.mean(dim=0)
    else:
        z_mean = torch.stack(latents).mean(dim=0, keepdim=True)
        mean_feat = model.vq.decode_latent(z_mean / model.latent_scale, snap=snap)[0]

    sem_prob = torch.sigmoid(model.vq.decoder.logits(mean_feat[None]))[0, :, :h, :w]
    heads = model.heads(mean_feat[None])
    heads = HeadOutputs(heads.sem_logits[0, :, :h, :w], heads.embedding[0, :, :h, :w],
                        heads.dir_logits[0, :, :h, :w])
    semantic = (sem_prob > vec_cfg.sem_threshold).numpy().astype(np.uint8)
    instance = cluster_instances(semantic, heads.embedding.numpy(), vec_cfg)
    dir_np = heads.dir_logits.numpy()
    direction = np.where(semantic.any(axis=0), 1 + np.argmax(dir_np[1:], axis=0), 0).astype(np.uint8)
    pmap = SemanticMap(semantic, instance.astype(np.uint16), direction, grid)
    polys = trace_polylines(instance, dir_np, grid, vec_cfg, sem_mask=semantic,
                            sem_probs=torch.softmax(heads.sem_logits, dim=0).numpy())
    return Prediction(pmap, polys, heads, mean_feat[:, :h, :w], chain_features[:, :, :h, :w],
                      torch.stack(latents))


@torch.no_grad()
def baseline_map(observation, model: DiffMapModel, grid: GridSpec | None = None) -> np.ndarray:
    """Binary class masks predicted by the baseline heads on its own features."""
    obs = _as_batch(observation)
    h, w = np.asarray(observation).shape[-2:]
    _, feat = model.baseline(obs)
    logits = model.base_heads(feat).sem_logits[0, :, :h, :w]
    cls = logits.argmax(dim=0).numpy()
    return np.stack([(cls == c + 1) for c in range(logits.shape[0] - 1)]).astype(np.uint8)
