"""PNG overlays of selected units on images and on velocity sequences."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .core import HardMask, Sample, UnitGrid

RED = np.array([255, 0, 0], dtype=float)
YELLOW = np.array([255, 255, 0], dtype=float)
FOREGROUND = 0.5


def _features(x) -> np.ndarray:
    return np.asarray(x.features if isinstance(x, Sample) else x, dtype=float)


def overlay_array(x, mask: HardMask, grid: UnitGrid, alpha: float = 0.5,
                  threshold: float = FOREGROUND) -> np.ndarray:
    """RGB uint8 array with selected units tinted.

    A selected unit is tinted red when any of its pixels (channel mean) is
    brighter than ``threshold``, yellow otherwise.
    """
    feats = _features(x)
    if feats.ndim != 3:
        raise ValueError(f"overlay needs a (C, H, W) image, got shape {feats.shape}; "
                         "use render_sequence for (C, L) samples")
    if mask.num_units != grid.num_units:
        raise ValueError(f"mask has {mask.num_units} units, grid has {grid.num_units}")
    rgb = feats.transpose(1, 2, 0)
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    rgb = rgb * 255.0
    intensity = feats.mean(axis=0)
    for u in mask.selected:
        region = grid.unit_index == u
        tint = RED if (intensity[region] > threshold).any() else YELLOW
        rgb[region] = (1 - alpha) * rgb[region] + alpha * tint
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render_overlay(x, mask: HardMask, grid: UnitGrid, path, scale: int = 1, **kwargs) -> Path:
    arr = overlay_array(x, mask, grid, **kwargs)
    img = Image.fromarray(arr, mode="RGB")
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    img.save(path, format="PNG")
    return path


def tinted_pixels(path) -> int:
    """Count non-gray pixels in a rendered overlay."""
    arr = np.asarray(Image.open(path).convert("RGB")).astype(int)
    return int(((arr[..., 0] != arr[..., 1]) | (arr[..., 1] != arr[..., 2])).sum())


def render_sequence(x, mask: HardMask, grid: UnitGrid, path, height: int = 120, step: int = 4) -> Path:
    """Line plot of each channel with selected segments shaded."""
    feats = _features(x)
    if feats.ndim != 2:
        raise ValueError(f"sequence renderer needs a (C, L) sample, got shape {feats.shape}")
    channels, length = feats.shape
    width = length * step
    img = Image.new("RGB", (width, height * channels), "white")
    draw = ImageDraw.Draw(img)
    unit_of = np.asarray(grid.unit_index)
    for u in mask.selected:
        cols = np.flatnonzero(unit_of == u)
        draw.rectangle([cols.min() * step, 0, (cols.max() + 1) * step - 1, height * channels - 1],
                       fill=(255, 230, 120))
    for c in range(channels):
        top = c * height
        ys = top + (1.0 - np.clip(feats[c], 0, 1)) * (height - 1)
        pts = [(i * step + step // 2, float(y)) for i, y in enumerate(ys)]
        draw.line([(0, top + height // 2), (width, top + height // 2)], fill=(200, 200, 200))
        draw.line(pts, fill=(20, 60, 160), width=1)
    path = Path(path)
    img.save(path, format="PNG")
    return path


def render(x, mask: HardMask, grid: UnitGrid, path, **kwargs) -> Path:
    feats = _features(x)
    if feats.ndim == 3:
        return render_overlay(feats, mask, grid, path, **kwargs)
    return render_sequence(feats, mask, grid, path, **kwargs)
