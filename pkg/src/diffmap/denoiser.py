"""Decoupled conditional UNet producing noise and clean-latent predictions.

The condition (BEV features) enters twice: resized and concatenated with the
noisy latent at the input, and as key/value of a cross-attention block in
every level of the shared encoder and of both decoders.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from diffmap.errors import ConfigError, ContractError


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 8
    cond_in: int = 64
    cond_dim: int = 16
    widths: tuple = (32, 64, 64)
    heads: int = 4
    time_dim: int = 64
    T: int = 1000
    kernel_size: int = 3

    def __post_init__(self):
        if len(self.widths) < 1:
            raise ConfigError("need at least one width")
        if self.kernel_size not in (1, 3):
            raise ConfigError("kernel_size must be 1 or 3")
        for w in self.widths:
            if w % self.heads:
                raise ConfigError(f"width {w} not divisible by {self.heads} heads")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ConditionProjector(nn.Module):
    """Area-average the BEV grid down to the latent grid, then a learned 1x1 projection."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, 1)

    @staticmethod
    def resize(B: torch.Tensor, size) -> torch.Tensor:
        if tuple(B.shape[-2:]) == tuple(size):
            return B
        return F.adaptive_avg_pool2d(B, size)

    def forward(self, B, size):
        return self.proj(self.resize(B, size))


def condition_concat(z_t: torch.Tensor, B_tilde: torch.Tensor) -> torch.Tensor:
    if z_t.shape[-2:] != B_tilde.shape[-2:] or z_t.shape[0] != B_tilde.shape[0]:
        raise ContractError(f"spatial mismatch: {tuple(z_t.shape)} vs {tuple(B_tilde.shape)}")
    return torch.cat([z_t, B_tilde], dim=1)


class CrossAttention(nn.Module):
    """Multi-head attention of a query map over a context map, residual-added."""

    def __init__(self, query_dim: int, context_dim: int, heads: int = 4):
        super().__init__()
        if query_dim % heads:
            raise ConfigError(f"query dim {query_dim} not divisible by {heads} heads")
        self.heads = heads
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(context_dim, query_dim, bias=False)
        self.to_v = nn.Linear(context_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)

    def attend(self, x: torch.Tensor, context: torch.Tensor):
        """Attention output before the residual, and the (B, heads, Nq, Nk) weights."""
        b, c, h, w = x.shape
        q = self.to_q(x.flatten(2).transpose(1, 2))
        ctx = context.flatten(2).transpose(1, 2)
        k, v = self.to_k(ctx), self.to_v(ctx)
        dh = c // self.heads

        def split(a):
            return a.reshape(a.shape[0], a.shape[1], self.heads, dh).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return out, weights

    def forward(self, x, context):
        return x + self.attend(x, context)[0]


def cross_attention(query_map, context_map, module: CrossAttention):
    """Functional form of :class:`CrossAttention` (residual included)."""
    return module(query_map, context_map)


class TimeResBlock(nn.Module):
    """Residual conv block with per-level affine modulation by the time embedding."""

    def __init__(self, ch: int, time_dim: int, k: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, k, padding=k // 2)
        self.conv2 = nn.Conv2d(ch, ch, k, padding=k // 2)
        self.mod = nn.Linear(time_dim, 2 * ch)

    def forward(self, x, temb):
        h = self.conv1(F.silu(x))
        scale, shift = self.mod(temb)[:, :, None, None].chunk(2, dim=1)
        h = h * (1 + scale) + shift
        return x + self.conv2(F.silu(h))


class Level(nn.Module):
    def __init__(self, ch, cfg: DenoiserConfig):
        super().__init__()
        self.res = TimeResBlock(ch, cfg.time_dim, cfg.kernel_size)
        self.attn = CrossAttention(ch, cfg.cond_dim, cfg.heads)

    def forward(self, x, temb, cond):
        return self.attn(self.res(x, temb), ConditionProjector.resize(cond, x.shape[-2:]))


class Decoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w, k = cfg.widths, cfg.kernel_size
        self.ups = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.levels = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.ups.append(nn.Conv2d(w[i + 1], w[i], k, padding=k // 2))
            self.merges.append(nn.Conv2d(2 * w[i], w[i], 1))
            self.levels.append(Level(w[i], cfg))
        self.out = nn.Conv2d(w[0], cfg.latent_dim, k, padding=k // 2)

    def forward(self, h, skips, temb, cond):
        for up, merge, level, skip in zip(self.ups, self.merges, self.levels, reversed(skips)):
            h = up(F.interpolate(h, size=skip.shape[-2:], mode="nearest"))
            h = level(merge(torch.cat([h, skip], dim=1)), temb, cond)
        return self.out(F.silu(h))


class Denoiser(nn.Module):
    """Shared encoder + bottleneck, separate noise (eps) and clean-latent (z) decoders."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w, k = cfg.widths, cfg.kernel_size
        self.cond = ConditionProjector(cfg.cond_in, cfg.cond_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.inp = nn.Conv2d(cfg.latent_dim + cfg.cond_dim, w[0], k, padding=k // 2)
        self.enc = nn.ModuleList(Level(w[i], cfg) for i in range(cfg.depth))
        self.down = nn.ModuleList(
            nn.Conv2d(w[i], w[i + 1], 3 if k == 3 else 2, stride=2, padding=1 if k == 3 else 0)
            for i in range(cfg.depth))
        self.mid = Level(w[-1], cfg)
        self.dec_eps = Decoder(cfg)
        self.dec_z = Decoder(cfg)

    def shared_parameters(self):
        branch = {id(p) for p in self.dec_eps.parameters()} | {id(p) for p in self.dec_z.parameters()}
        return [p for p in self.parameters() if id(p) not in branch]

    def forward(self, z_t: torch.Tensor, t, B: torch.Tensor):
        """Return ``(eps_hat, z_hat)``, each shaped like ``z_t`` (B, D', H', W')."""
        cfg = self.cfg
        if z_t.dim() != 4 or z_t.shape[1] != cfg.latent_dim:
            raise ContractError(f"z_t must be (B, {cfg.latent_dim}, H', W'), got {tuple(z_t.shape)}")
        h_, w_ = z_t.shape[-2:]
        if h_ % (2 ** cfg.depth) or w_ % (2 ** cfg.depth):
            raise ContractError(f"latent {h_}x{w_} not divisible by 2^{cfg.depth}")
        if B.shape[0] != z_t.shape[0] or B.shape[1] != cfg.cond_in:
            raise ContractError(f"condition must be (B, {cfg.cond_in}, H, W), got {tuple(B.shape)}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and z_t.shape[0] > 1:
            t = t.expand(z_t.shape[0])
        if torch.any(t < 1) or torch.any(t > cfg.T):
            raise ContractError(f"t out of range [1, {cfg.T}]")
        temb = self.time_mlp(timestep_embedding(t, cfg.time_dim).to(z_t.dtype))
        cond = self.cond(B, (h_, w_))
        h = self.inp(condition_concat(z_t, cond))
        skips = []
        for level, down in zip(self.enc, self.down):
            h = level(h, temb, cond)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb, cond)
        return self.dec_eps(h, skips, temb, cond), self.dec_z(h, skips, temb, cond)
