"""Corruption model emulating sensor artifacts on ground-truth rasters."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from diffmap.errors import ConfigError


@dataclass(frozen=True)
class CorruptionConfig:
    """Corruption strengths. All zeros is the identity."""

    dropout_patch_rate: float = 0.0
    patch_size_px: int = 0
    blur_sigma_px: float = 0.0
    jitter_px: float = 0.0
    erosion_dilation_px: int = 0
    flip_label_rate: float = 0.0

    def __post_init__(self):
        for name in ("dropout_patch_rate", "flip_label_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("patch_size_px", "blur_sigma_px", "jitter_px", "erosion_dilation_px"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self):
        return asdict(self)


def corrupt(gt_semantic, cfg: CorruptionConfig, seed: int) -> np.ndarray:
    """Degrade a binary (C, H, W) raster into a float32 observation in [0, 1].

    Stages run in a fixed order: patch dropout, erosion/dilation, smooth pixel
    jitter, Gaussian blur, label flipping. Each stage draws from its own child
    stream of ``seed`` so toggling one stage leaves the others' noise unchanged.
    """
    x = np.asarray(gt_semantic, dtype=np.float32).copy()
    c, h, w = x.shape
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]

    # patch dropout on a regular grid of patches
    if cfg.dropout_patch_rate > 0 and cfg.patch_size_px > 0:
        p = cfg.patch_size_px
        nr, nc = -(-h // p), -(-w // p)
        drop = streams[0].random((c, nr, nc)) < cfg.dropout_patch_rate
        full = np.repeat(np.repeat(drop, p, axis=1), p, axis=2)[:, :h, :w]
        x[full] = 0.0

    if cfg.erosion_dilation_px > 0:
        k = cfg.erosion_dilation_px
        st = np.ones((2 * k + 1, 2 * k + 1), bool)
        erode = streams[1].random(c) < 0.5
        for i in range(c):
            fg = x[i] > 0.5
            fg = ndimage.binary_erosion(fg, st) if erode[i] else ndimage.binary_dilation(fg, st)
            x[i] = fg.astype(np.float32)

    if cfg.jitter_px > 0:
        x = _smooth_jitter(x, cfg.jitter_px, streams[2])

    if cfg.blur_sigma_px > 0:
        for i in range(c):
            x[i] = ndimage.gaussian_filter(x[i], cfg.blur_sigma_px, mode="constant")

    if cfg.flip_label_rate > 0:
        flip = streams[4].random(x.shape) < cfg.flip_label_rate
        x[flip] = 1.0 - x[flip]

    return np.clip(x, 0.0, 1.0).astype(np.float32)


def _smooth_jitter(x, amp, rng, cell=16):
    """Warp by a displacement field interpolated from a coarse random grid."""
    c, h, w = x.shape
    gr, gc = h // cell + 2, w // cell + 2
    coarse = rng.uniform(-amp, amp, size=(2, gr, gc))
    rows = np.linspace(0, gr - 1, h)
    cols = np.linspace(0, gc - 1, w)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    dr = ndimage.map_coordinates(coarse[0], [rr, cc], order=1)
    dc = ndimage.map_coordinates(coarse[1], [rr, cc], order=1)
    src_r = np.clip(np.rint(np.arange(h)[:, None] + dr), 0, h - 1).astype(np.int64)
    src_c = np.clip(np.rint(np.arange(w)[None, :] + dc), 0, w - 1).astype(np.int64)
    return x[:, src_r, src_c]
