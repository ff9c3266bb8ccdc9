"""Training, inference, evaluation and figure emission."""

from diffmap.pipeline.config import (
    DIFFUSION_RECIPE, VQ_RECIPE, RunManifest, TrainConfig, derive_seed, recipe, resolve_seed,
)
from diffmap.pipeline.evaluate import MissingSamplesError, evaluate, fit_intervals
from diffmap.pipeline.infer import Prediction, baseline_map, sample_map
from diffmap.pipeline.models import DiffMapModel, load_diffmap, load_vqvae, save_diffmap
from diffmap.pipeline.train import train_diffusion, train_vqvae
from diffmap.pipeline.viz import render_comparison

__all__ = [
    "DIFFUSION_RECIPE", "VQ_RECIPE", "DiffMapModel", "MissingSamplesError", "Prediction",
    "RunManifest", "TrainConfig", "baseline_map", "derive_seed", "evaluate", "fit_intervals",
    "load_diffmap", "load_vqvae", "recipe", "render_comparison", "resolve_seed", "sample_map",
    "save_diffmap", "train_diffusion", "train_vqvae",
]
