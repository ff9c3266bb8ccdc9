"""Train the two stages on a toy set and refine corrupted observations.

Stage one fits a VQ-VAE to the ground-truth rasters (8x downsampling, 512
codes). Stage two freezes it and trains the baseline encoder, the decoupled
two-branch denoiser and the instance heads jointly. At inference every
observation is refined by three 20-step reverse chains whose decoded features
are averaged, thresholded and vectorized.

With the default recipes this takes roughly twenty minutes on one CPU core;
pass smaller ``--vq-steps`` / ``--diff-steps`` for a quick look.
"""

import argparse
import time
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from diffmap.mapforge import CLASS_NAMES, generate_scene, preset
from diffmap.pipeline.config import recipe
from diffmap.pipeline.infer import baseline_map, sample_map
from diffmap.pipeline.train import train_diffusion, train_vqvae
from diffmap.pipeline.viz import render_comparison


def pooled_iou(preds, gts):
    inter = sum((p & g).sum(axis=(1, 2)) for p, g in zip(preds, gts))
    union = sum((p | g).sum(axis=(1, 2)) for p, g in zip(preds, gts))
    return inter / np.maximum(union, 1)


def stripes(mask):
    return ndimage.label(mask, structure=np.ones((3, 3), bool))[1]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo_run")
    parser.add_argument("--n", type=int, default=16)
    parser.add_argument("--vq-steps", type=int, default=recipe("vqvae").steps)
    parser.add_argument("--diff-steps", type=int, default=recipe("diffusion").steps)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)

    samples = [generate_scene(seed, preset("short")) for seed in range(args.n)]

    t0 = time.perf_counter()
    vq = train_vqvae(samples, recipe("vqvae", steps=args.vq_steps, log_every=0),
                     out=out / "vq.pt").model
    print(f"VQ-VAE: {args.vq_steps} steps in {time.perf_counter() - t0:.0f}s")

    t0 = time.perf_counter()
    res = train_diffusion(samples, vq, recipe("diffusion", steps=args.diff_steps, log_every=0),
                          out=out / "diffmap.pt")
    print(f"diffusion: {args.diff_steps} steps in {time.perf_counter() - t0:.0f}s, "
          f"final loss {np.mean(res.losses[-50:]):.3f}")

    gts = [s.gt.semantic > 0 for s in samples]
    obs = [s.observation > 0.5 for s in samples]
    preds = [sample_map(s.observation, res.model, seed=k) for k, s in enumerate(samples)]
    ours = [p.map.semantic > 0 for p in preds]
    base = [baseline_map(s.observation, res.model) > 0 for s in samples]

    for name, masks in (("observation", obs), ("baseline heads", base), ("DiffMap", ours)):
        ious = pooled_iou(masks, gts)
        per_class = ", ".join(f"{c} {v:.3f}" for c, v in zip(CLASS_NAMES, ious))
        matched = sum(stripes(m[1]) == stripes(g[1]) for m, g in zip(masks, gts))
        print(f"{name:>14}: mIoU {ious.mean():.3f} ({per_class}); stripe count right on "
              f"{matched}/{len(samples)}")

    for k in range(min(4, len(samples))):
        render_comparison(samples[k], preds[k].map, out / f"refined_{k}.png",
                          baseline=baseline_map(samples[k].observation, res.model))
    print(f"figures in {out}")


if __name__ == "__main__":
    main()
