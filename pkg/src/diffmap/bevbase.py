"""Toy baseline BEV encoder.

It plays two roles: it turns the corrupted observation into BEV features
that condition the denoiser, and it emits a feature map on which its own
prediction heads are supervised.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from diffmap.errors import ConfigError, ContractError
from diffmap.mapforge.types import GridSpec


@dataclass(frozen=True)
class BaselineConfig:
    in_channels: int = 3
    channels: int = 64  # C of the BEV features
    depth: int = 2
    width: int = 32
    feat_channels: int = 16

    def __post_init__(self):
        if self.channels < 1 or self.feat_channels < 1:
            raise ConfigError("channels and feat_channels must be >= 1")
        if self.depth < 0 or self.width < 1:
            raise ConfigError("depth must be >= 0 and width >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class BevFeature:
    values: torch.Tensor  # (B, C, H, W)
    grid: GridSpec | None = None


class BaselineEncoder(nn.Module):
    """Strided conv stack with a single upsampling path back to full resolution."""

    def __init__(self, cfg: BaselineConfig = BaselineConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.stem = nn.Conv2d(cfg.in_channels, w, 3, padding=1)
        self.down = nn.ModuleList(
            nn.Conv2d(w, w, 3, stride=2, padding=1) for _ in range(cfg.depth))
        self.mid = nn.Conv2d(w, w, 3, padding=1)
        self.fuse = nn.Conv2d(2 * w, w, 1)
        self.to_bev = nn.Conv2d(w, cfg.channels, 1)
        self.to_feat = nn.Conv2d(w, cfg.feat_channels, 1)

    def forward(self, obs: torch.Tensor):
        if obs.dim() != 4 or obs.shape[1] != self.cfg.in_channels:
            raise ContractError(
                f"observation must be (B, {self.cfg.in_channels}, H, W), got {tuple(obs.shape)}")
        if not torch.isfinite(obs).all():
            raise ContractError("observation has non-finite values")
        s = F.silu(self.stem(obs))
        h = s
        for conv in self.down:
            h = F.silu(conv(h))
        h = F.silu(self.mid(h))
        if h.shape[-2:] != s.shape[-2:]:
            h = F.interpolate(h, size=s.shape[-2:], mode="bilinear", align_corners=False)
        h = F.silu(self.fuse(torch.cat([s, h], dim=1)))
        return self.to_bev(h), self.to_feat(h)


def baseline_forward(observation, model: BaselineEncoder, grid: GridSpec | None = None):
    """Run the encoder on a (C, H, W) or (B, C, H, W) observation.

    Returns ``(BevFeature, feature_map)``; both keep the spatial size of the input.
    """
    x = torch.as_tensor(observation)
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    if grid is not None and tuple(x.shape[-2:]) != grid.shape:
        raise ContractError(f"observation {tuple(x.shape[-2:])} does not match grid {grid.shape}")
    x = x.to(next(model.parameters()).dtype)
    bev, feat = model(x)
    if squeeze:
        bev, feat = bev[0], feat[0]
    return BevFeature(bev, grid), feat
