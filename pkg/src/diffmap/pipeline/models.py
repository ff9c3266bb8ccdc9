"""Model bundles and checkpoint (de)serialization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from diffmap.bevbase import BaselineConfig, BaselineEncoder
from diffmap.denoiser import Denoiser, DenoiserConfig
from diffmap.diffcore import NoiseSchedule, make_linear_schedule
from diffmap.errors import ConfigError, FormatError
from diffmap.instancing import HeadConfig, Heads
from diffmap.mapforge.raster import pad_to_multiple
from diffmap.vq import VQVAE, VqConfig

CHECKPOINT_VERSION = 1
PAD_MULTIPLE = 64


def save_checkpoint(path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"schema_version": CHECKPOINT_VERSION, "kind": kind, **payload}, path)
    return path


def load_checkpoint(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} not found")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - torch raises many types for bad files
        raise FormatError(f"cannot read checkpoint {path}: {exc}", field="checkpoint") from exc
    if ckpt.get("kind") != kind:
        raise ConfigError(f"{path} holds a {ckpt.get('kind')!r} checkpoint, expected {kind!r}")
    if ckpt.get("schema_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {ckpt.get('schema_version')}")
    return ckpt


def load_vqvae(path) -> tuple[VQVAE, dict]:
    ckpt = load_checkpoint(path, "vqvae")
    model = VQVAE(VqConfig.from_dict(ckpt["vq_config"]))
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, ckpt


@dataclass
class DiffMapModel:
    """Everything needed to sample maps: frozen VQ, baseline, denoiser and heads."""

    vq: VQVAE
    baseline: BaselineEncoder
    denoiser: Denoiser
    heads: Heads
    base_heads: Heads
    schedule: NoiseSchedule
    latent_scale: float = 1.0

    @classmethod
    def build(cls, vq: VQVAE, baseline_cfg=None, denoiser_cfg=None, head_cfg=None,
              schedule: NoiseSchedule | None = None, latent_scale: float = 1.0):
        baseline_cfg = baseline_cfg or BaselineConfig()
        schedule = schedule or make_linear_schedule()
        denoiser_cfg = denoiser_cfg or DenoiserConfig(
            latent_dim=vq.cfg.code_dim, cond_in=baseline_cfg.channels, T=schedule.T)
        head_cfg = head_cfg or HeadConfig(feat_channels=vq.cfg.feat_channels)
        check_compatible(vq.cfg, baseline_cfg, denoiser_cfg, head_cfg, schedule)
        base_head_cfg = HeadConfig(**{**head_cfg.to_dict(), "feat_channels": baseline_cfg.feat_channels})
        return cls(vq, BaselineEncoder(baseline_cfg), Denoiser(denoiser_cfg), Heads(head_cfg),
                   Heads(base_head_cfg), schedule, latent_scale)

    def modules(self):
        return {"vq": self.vq, "baseline": self.baseline, "denoiser": self.denoiser,
                "heads": self.heads, "base_heads": self.base_heads}

    def eval(self):
        for m in self.modules().values():
            m.eval()
        return self

    def trainable_parameters(self):
        for name in ("baseline", "denoiser", "heads", "base_heads"):
            yield from self.modules()[name].parameters()

    def state(self) -> dict:
        return {
            "vq_config": self.vq.cfg.to_dict(),
            "baseline_config": self.baseline.cfg.to_dict(),
            "denoiser_config": self.denoiser.cfg.to_dict(),
            "head_config": self.heads.cfg.to_dict(),
            "schedule": self.schedule.to_dict(),
            "latent_scale": float(self.latent_scale),
            "weights": {k: m.state_dict() for k, m in self.modules().items()},
        }

    @classmethod
    def from_state(cls, st: dict) -> "DiffMapModel":
        vq = VQVAE(VqConfig.from_dict(st["vq_config"]))
        model = cls.build(vq, BaselineConfig.from_dict(st["baseline_config"]),
                          DenoiserConfig.from_dict(st["denoiser_config"]),
                          HeadConfig.from_dict(st["head_config"]),
                          NoiseSchedule.from_dict(st["schedule"]), st["latent_scale"])
        for k, m in model.modules().items():
            m.load_state_dict(st["weights"][k])
        return model.eval()


def check_compatible(vq_cfg: VqConfig, base_cfg: BaselineConfig, den_cfg: DenoiserConfig,
                     head_cfg: HeadConfig, schedule: NoiseSchedule, grid_shape=None):
    """Raise :class:`ConfigError` when the stage configurations cannot work together."""
    if den_cfg.latent_dim != vq_cfg.code_dim:
        raise ConfigError(f"denoiser latent_dim {den_cfg.latent_dim} != VQ code_dim {vq_cfg.code_dim}")
    if den_cfg.cond_in != base_cfg.channels:
        raise ConfigError(f"denoiser cond_in {den_cfg.cond_in} != baseline channels {base_cfg.channels}")
    if head_cfg.feat_channels != vq_cfg.feat_channels:
        raise ConfigError("head feat_channels must match the VQ decoder feature width")
    if den_cfg.T != schedule.T:
        raise ConfigError(f"denoiser T {den_cfg.T} != schedule T {schedule.T}")
    if grid_shape is not None:
        need = vq_cfg.factor * 2 ** den_cfg.depth
        h, w = grid_shape
        if h % need or w % need:
            raise ConfigError(
                f"padded grid {h}x{w} not divisible by VQ factor x 2^depth = {need}")


def save_diffmap(path, model: DiffMapModel, extra: dict | None = None) -> Path:
    return save_checkpoint(path, "diffmap", {**model.state(), **(extra or {})})


def load_diffmap(path) -> tuple[DiffMapModel, dict]:
    ckpt = load_checkpoint(path, "diffmap")
    return DiffMapModel.from_state(ckpt), ckpt


def stack_samples(samples, k: int = PAD_MULTIPLE):
    """Pad every sample to a multiple of ``k`` and stack into arrays.

    Returns a dict with ``gt`` (N, C, H, W) float32, ``obs`` float32,
    ``instance`` / ``direction`` int64 (N, H, W) and the original ``shape``.
    """
    if not samples:
        raise FormatError("empty dataset", field="samples")
    shape = samples[0].gt.grid.shape
    gts, obs, inst, dirs = [], [], [], []
    for s in samples:
        if s.gt.grid.shape != shape:
            raise FormatError("samples have different grid shapes", field="grid")
        g, _ = pad_to_multiple(s.gt, k)
        o, _ = pad_to_multiple(s.observation, k)
        gts.append(g.semantic)
        obs.append(o)
        inst.append(g.instance.astype(np.int64))
        dirs.append(g.direction.astype(np.int64))
    return {
        "gt": torch.tensor(np.stack(gts), dtype=torch.float32),
        "obs": torch.tensor(np.stack(obs), dtype=torch.float32),
        "instance": np.stack(inst),
        "direction": np.stack(dirs),
        "shape": shape,
    }
