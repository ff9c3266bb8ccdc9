"""Static side-by-side comparison figures."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from diffmap.mapforge.types import CLASS_NAMES

BACKGROUND = (255, 255, 255)
PALETTE = {
    "divider": (230, 140, 20),
    "ped_crossing": (40, 90, 220),
    "boundary": (200, 30, 40),
}
GAP = 4
LEGEND_HEIGHT = 18
SWATCH = 10
PANEL_TITLES = ("observation", "baseline", "diffmap", "ground truth")


def colorize(masks, class_names=CLASS_NAMES, threshold: float = 0.5) -> np.ndarray:
    """(C, H, W) masks or probabilities to an RGB image; later classes paint over earlier ones."""
    m = np.asarray(masks)
    img = np.empty(m.shape[1:] + (3,), dtype=np.uint8)
    img[:] = BACKGROUND
    for c, name in enumerate(class_names):
        img[m[c] > threshold] = PALETTE[name]
    return img


def legend_boxes(class_names=CLASS_NAMES, top: int = 0, left: int = GAP):
    """Pixel boxes ``(x0, y0, x1, y1)`` of each class swatch in the legend strip, in class order."""
    boxes = []
    y0 = top + (LEGEND_HEIGHT - SWATCH) // 2
    x = left
    for name in class_names:
        boxes.append((x, y0, x + SWATCH - 1, y0 + SWATCH - 1))
        x += SWATCH + 6 + 7 * len(name) + 10
    return boxes


def render_comparison(sample, prediction=None, out_image=None, baseline=None, scale: int = 2,
                      class_names=CLASS_NAMES) -> Image.Image:
    """Write observation | baseline | DiffMap | ground truth panels with a class legend.

    Missing panels (for example a ground-truth-only render) are drawn as
    background. The image depends only on its inputs.

    Args:
      sample: :class:`MapSample` providing observation and ground truth.
      prediction: predicted :class:`SemanticMap` or (C, H, W) masks.
      out_image: PNG path; nothing is written when None.
      baseline: (C, H, W) masks from the baseline heads.
      scale: integer upsampling of each panel.

    Returns:
      The rendered ``PIL.Image``.
    """
    gt = sample.gt.semantic
    h, w = gt.shape[1:]
    blank = np.zeros_like(gt)

    def masks(x):
        if x is None:
            return blank
        return getattr(x, "semantic", x)

    panels = [sample.observation, masks(baseline), masks(prediction), gt]
    pw, ph = w * scale, h * scale
    width = GAP + len(panels) * (pw + GAP)
    height = GAP + ph + GAP + LEGEND_HEIGHT
    canvas = Image.new("RGB", (width, height), BACKGROUND)
    for k, p in enumerate(panels):
        rgb = colorize(p, class_names).repeat(scale, axis=0).repeat(scale, axis=1)
        canvas.paste(Image.fromarray(rgb), (GAP + k * (pw + GAP), GAP))
    draw = ImageDraw.Draw(canvas)
    for k in range(len(panels)):
        x0 = GAP + k * (pw + GAP)
        draw.rectangle((x0 - 1, GAP - 1, x0 + pw, GAP + ph), outline=(160, 160, 160))
    font = ImageFont.load_default()
    top = GAP + ph + GAP
    for name, box in zip(class_names, legend_boxes(class_names, top)):
        draw.rectangle(box, fill=PALETTE[name])
        draw.text((box[2] + 4, box[1] - 1), name, fill=(0, 0, 0), font=font)
    if out_image is not None:
        Path(out_image).parent.mkdir(parents=True, exist_ok=True)
        canvas.save(out_image, format="PNG", optimize=False)
    return canvas
