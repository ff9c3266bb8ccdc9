"""Training configuration, run manifests and reproducibility helpers."""

from __future__ import annotations

import hashlib
import json
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from diffmap.errors import ConfigError

SEED_ENV = "DIFFMAP_SEED"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training stage.

    Training is counted in optimizer steps; ``lr_schedule`` is
    ``"exponential"`` (multiply by ``lr_gamma`` every ``lr_every`` steps) or
    ``"multistep"`` (multiply by ``lr_gamma`` at each fraction in
    ``lr_milestones`` of the run) or ``"cosine"`` (half-cosine decay from
    ``lr`` to zero over ``steps``). ``grad_clip`` > 0 caps the global
    gradient norm. ``aux_to_latent`` lets the auxiliary head losses on the
    diffusion features backpropagate into the denoiser through ``z_hat``.
    """

    stage: str = "vqvae"
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    lr_schedule: str = "exponential"
    lr_gamma: float = 0.95
    lr_every: int = 100
    lr_milestones: tuple = (0.7, 0.9)
    w_diff: float = 1.0
    w_ce: float = 1.0
    w_disc: float = 1.0
    w_dir: float = 0.2
    grad_clip: float = 0.0
    aux_to_latent: bool = False
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in ("vqvae", "diffusion"):
            raise ConfigError(f"stage must be 'vqvae' or 'diffusion', got {self.stage!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if min(self.w_diff, self.w_ce, self.w_disc, self.w_dir) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.lr_schedule not in ("exponential", "multistep", "cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0 (0 disables clipping)")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "exponential":
            return self.lr * self.lr_gamma ** (step // self.lr_every)
        if self.lr_schedule == "multistep":
            n = sum(step >= int(m * self.steps) for m in self.lr_milestones)
            return self.lr * self.lr_gamma ** n
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(step, self.steps) / self.steps))
        return self.lr

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("betas", "lr_milestones"):
            if k in d:
                d[k] = tuple(d[k])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


VQ_RECIPE = TrainConfig(stage="vqvae", steps=2000, batch_size=8, lr=3e-3,
                        lr_schedule="cosine", grad_clip=1.0)
DIFFUSION_RECIPE = TrainConfig(stage="diffusion", steps=2500, batch_size=4, lr=1e-3,
                               weight_decay=1e-4, lr_schedule="multistep",
                               lr_gamma=1 / 3, lr_milestones=(0.7, 0.9))


def recipe(stage: str, **overrides) -> TrainConfig:
    base = VQ_RECIPE if stage == "vqvae" else DIFFUSION_RECIPE
    return replace(base, **overrides) if overrides else base


def resolve_seed(seed=None, default: int = 0) -> int:
    """Explicit seed, else ``$DIFFMAP_SEED``, else ``default``."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return default


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


@contextmanager
def flush_denormals():
    """Flush subnormal floats to zero inside the block.

    Tiny weights decaying into the subnormal range slow CPU training several
    fold; the setting is process-wide, so it is restored on exit.
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def torch_generator(*keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*keys))


def load_json_config(path) -> dict:
    """Read a JSON object of option values; anything else is a :class:`ConfigError`."""
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(str(p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def code_hash() -> str:
    root = Path(__file__).resolve().parents[1]
    return _hash_files([p for p in root.rglob("*.py")])


def data_hash(directory) -> str:
    d = Path(directory)
    return _hash_files([p for p in d.rglob("*") if p.is_file()])


@dataclass
class RunManifest:
    kind: str
    config: dict
    code_hash: str = ""
    data_hash: str = ""
    checkpoints: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
