"""VQ-VAE perceptual compression of map rasters.

Tensors are channel-first: a raster is ``(B, C, H, W)`` and a latent grid is
``(B, D, H/f, W/f)`` for downsampling factor ``f``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from diffmap.errors import ConfigError, ContractError


@dataclass(frozen=True)
class VqConfig:
    factor: int = 8
    beta: float = 0.25
    num_codes: int = 512
    code_dim: int = 8
    in_channels: int = 3
    feat_channels: int = 16
    widths: tuple = (32, 48, 64, 64, 64)

    def __post_init__(self):
        if self.factor not in (1, 2, 4, 8, 16):
            raise ConfigError(f"factor must be a power of two <= 16, got {self.factor}")
        if self.num_codes < 1 or self.code_dim < 1:
            raise ConfigError("codebook needs num_codes >= 1 and code_dim >= 1")
        if len(self.widths) < self.levels + 1:
            raise ConfigError(f"need {self.levels + 1} widths for factor {self.factor}")

    @property
    def levels(self) -> int:
        return int(math.log2(self.factor))

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class Encoder(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        w = cfg.widths[: cfg.levels + 1]
        layers = [nn.Conv2d(cfg.in_channels, w[0], 3, padding=1), nn.SiLU()]
        for i in range(cfg.levels):
            layers += [nn.Conv2d(w[i], w[i + 1], 4, stride=2, padding=1), nn.SiLU()]
        layers += [ResBlock(w[-1]), nn.SiLU(), nn.Conv2d(w[-1], cfg.code_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Latent grid to full-resolution semantic features, plus a linear logit layer."""

    def __init__(self, cfg: VqConfig):
        super().__init__()
        w = cfg.widths[: cfg.levels + 1]
        self.stem = nn.Sequential(nn.Conv2d(cfg.code_dim, w[-1], 3, padding=1), ResBlock(w[-1]))
        ups = []
        for i in reversed(range(cfg.levels)):
            ups.append(nn.Conv2d(w[i + 1], w[i], 3, padding=1))
        self.ups = nn.ModuleList(ups)
        self.feat = nn.Conv2d(w[0], cfg.feat_channels, 3, padding=1)
        self.logits = nn.Conv2d(cfg.feat_channels, cfg.in_channels, 1)

    def features(self, z):
        h = self.stem(z)
        for conv in self.ups:
            h = F.silu(conv(F.interpolate(F.silu(h), scale_factor=2, mode="nearest")))
        return F.silu(self.feat(h))

    def forward(self, z):
        return self.logits(self.features(z))


class Codebook(nn.Module):
    def __init__(self, num_codes: int, code_dim: int):
        super().__init__()
        self.embeddings = nn.Parameter(
            torch.empty(num_codes, code_dim).uniform_(-1.0 / num_codes, 1.0 / num_codes))
        self.register_buffer("usage", torch.zeros(num_codes, dtype=torch.long))
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def init_from(self, z_e: torch.Tensor, generator: torch.Generator | None = None):
        """Seed the table with encoder outputs drawn from ``z_e`` (B, D, h, w)."""
        flat = z_e.permute(0, 2, 3, 1).reshape(-1, z_e.shape[1])
        k = self.embeddings.shape[0]
        idx = torch.randint(0, flat.shape[0], (k,), generator=generator)
        noise = torch.randn(k, flat.shape[1], generator=generator) * 0.01 * flat.std()
        self.embeddings.copy_(flat[idx] + noise.to(flat.dtype))
        self.initialized.fill_(True)


def nearest_codes(flat: torch.Tensor, embeddings: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the nearest code row for each row of ``flat`` (N, D); ties go to the lowest index."""
    out = []
    for s in range(0, flat.shape[0], chunk):
        q = flat[s: s + chunk]
        d = ((q[:, None, :] - embeddings[None, :, :]) ** 2).sum(-1)
        out.append(torch.argmin(d, dim=1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def quantize(z_e: torch.Tensor, embeddings: torch.Tensor):
    """Snap each latent vector to its nearest codebook row.

    Returns ``(z_q, indices)`` where ``z_q`` has the shape of ``z_e`` and
    carries gradients to ``embeddings`` (not to ``z_e``); use
    :func:`straight_through` to route decoder gradients back to the encoder.
    """
    if embeddings.numel() == 0 or embeddings.shape[0] == 0:
        raise ConfigError("empty codebook")
    if z_e.shape[1] != embeddings.shape[1]:
        raise ContractError(f"latent dim {z_e.shape[1]} != code dim {embeddings.shape[1]}")
    b, d, h, w = z_e.shape
    flat = z_e.detach().permute(0, 2, 3, 1).reshape(-1, d)
    idx = nearest_codes(flat, embeddings.detach())
    z_q = embeddings[idx].reshape(b, h, w, d).permute(0, 3, 1, 2)
    return z_q, idx.reshape(b, h, w)


def straight_through(z_e, z_q):
    """Value of ``z_q`` with the gradient of ``z_e``."""
    return z_e + (z_q - z_e).detach()


def vqvae_loss(x, x_hat, z_e, z_q, beta: float = 0.25):
    """Three-term VQ-VAE objective.

    ``recon`` is the per-pixel binary cross-entropy of logits ``x_hat``
    against masks ``x``; ``vq`` = mean (sg[z_e] - z_q)^2 moves the codes and
    ``commit`` = mean (z_e - sg[z_q])^2 moves the encoder. Squared norms are
    averaged over elements.

    Returns:
      ``(total, recon, vq, commit)`` with ``total = recon + vq + beta * commit``.
    """
    if x.shape != x_hat.shape:
        raise ContractError(f"x {tuple(x.shape)} vs x_hat {tuple(x_hat.shape)}")
    if z_e.shape != z_q.shape:
        raise ContractError(f"z_e {tuple(z_e.shape)} vs z_q {tuple(z_q.shape)}")
    recon = F.binary_cross_entropy_with_logits(x_hat, x.to(x_hat.dtype))
    vq = F.mse_loss(z_q, z_e.detach())
    commit = F.mse_loss(z_e, z_q.detach())
    return recon + vq + beta * commit, recon, vq, commit


class VQVAE(nn.Module):
    def __init__(self, cfg: VqConfig = VqConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.codebook = Codebook(cfg.num_codes, cfg.code_dim)
        self.decoder = Decoder(cfg)

    def encode(self, x):
        f = self.cfg.factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ContractError(f"raster {tuple(x.shape[-2:])} not divisible by factor {f}; pad first")
        if x.shape[1] != self.cfg.in_channels:
            raise ContractError(f"expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        return self.encoder(x)

    def quantize(self, z_e):
        return quantize(z_e, self.codebook.embeddings)

    def decode(self, z_q):
        return self.decoder(z_q)

    def decode_features(self, z_q):
        return self.decoder.features(z_q)

    def decode_latent(self, z, snap: bool = True):
        """Decode an arbitrary latent, optionally snapping it to the codebook first."""
        if snap:
            z, _ = self.quantize(z)
        return self.decoder.features(z)

    def forward(self, x):
        z_e = self.encode(x)
        z_q, idx = self.quantize(z_e)
        x_hat = self.decode(straight_through(z_e, z_q))
        if self.training:
            with torch.no_grad():
                self.codebook.usage += torch.bincount(idx.flatten(), minlength=self.cfg.num_codes)
        return x_hat, z_e, z_q, idx
