"""Downsampling-factor ablation: train and evaluate one model per VQ factor."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from diffmap.evalkit import default_intervals, merge_stats, sample_stats, summarize
from diffmap.pipeline.config import recipe
from diffmap.pipeline.infer import sample_map
from diffmap.pipeline.models import stack_samples
from diffmap.pipeline.train import train_diffusion, train_vqvae
from diffmap.vq import VqConfig

FACTORS = (4, 8, 16)


@dataclass(frozen=True)
class AblationConfig:
    factors: tuple = FACTORS
    vq_steps: int = 300
    diff_steps: int = 300
    sample_steps: int = 20
    n_samples: int = 1
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["factors"] = list(self.factors)
        return d


@dataclass
class AblationRow:
    factor: int
    latent_shape: list
    recon_miou: float
    miou: float
    map: float | None
    seconds: float
    per_class_iou: dict = field(default_factory=dict)


def _recon_miou(vq, samples) -> float:
    x = stack_samples(samples)["gt"]
    with torch.no_grad():
        pred = vq(x)[0] > 0
    gt = x > 0.5
    vals = []
    for c in range(x.shape[1]):
        union = (pred[:, c] | gt[:, c]).sum().item()
        vals.append((pred[:, c] & gt[:, c]).sum().item() / union if union else 1.0)
    return float(np.mean(vals))


def run_factor(factor: int, samples, cfg: AblationConfig) -> AblationRow:
    t0 = time.perf_counter()
    vq = train_vqvae(samples, recipe("vqvae", steps=cfg.vq_steps, seed=cfg.seed, log_every=0),
                     VqConfig(factor=factor)).model
    model = train_diffusion(samples, vq, recipe("diffusion", steps=cfg.diff_steps, seed=cfg.seed,
                                                log_every=0)).model
    stats = []
    for k, s in enumerate(samples):
        pred = sample_map(s.observation, model, cfg.sample_steps, cfg.n_samples, seed=cfg.seed + k)
        stats.append(sample_stats(pred.map, s.gt, default_intervals(s.gt.grid), pred.polylines,
                                  s.polylines))
    report = summarize(merge_stats(stats))
    h, w = stack_samples(samples[:1])["gt"].shape[-2:]
    return AblationRow(
        factor=factor,
        latent_shape=[h // factor, w // factor],
        recon_miou=_recon_miou(vq, samples),
        miou=report["means"]["all"]["iou"],
        map=report["means"]["all"]["ap"],
        seconds=time.perf_counter() - t0,
        per_class_iou={k: v["all"]["iou"] for k, v in report["per_class"].items()},
    )


def ablate_factor(samples, cfg: AblationConfig = AblationConfig(), out_path=None) -> dict:
    """Train, sample and score one model per factor; one report row each.

    No ordering between factors is implied at this scale; the rows exist to
    exercise the full pipeline at every latent resolution.
    """
    rows = [asdict(run_factor(f, samples, cfg)) for f in cfg.factors]
    report = {"schema_version": 1, "config": cfg.to_dict(), "n_samples": len(samples), "rows": rows}
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def format_ablation(report: dict) -> str:
    lines = [f"{'factor':>6} {'latent':>9} {'recon mIoU':>11} {'mIoU':>7} {'mAP':>7}"]
    for r in report["rows"]:
        ap = "-" if r["map"] is None else f"{100 * r['map']:.1f}"
        lines.append(f"{r['factor']:>6} {'x'.join(map(str, r['latent_shape'])):>9} "
                     f"{100 * r['recon_miou']:>11.1f} {100 * r['miou']:>7.1f} {ap:>7}")
    return "\n".join(lines)
