"""Synthetic polyp-like dataset generator for desk-scale experiments.

Each sample is a smooth, tinted background with 1-3 textured ellipses blended
in with soft borders and a few specular highlights. The mask is the exact
union of the ellipses. Ellipse parameters are written to ``meta.jsonl`` so the
masks can be re-rasterized independently.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .data import split, write_image, write_mask

MIN_FRACTION = 0.02
MAX_FRACTION = 0.45


def ellipse_field(h: int, w: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    """Normalized radius; <= 1 inside the ellipse. Pixel (row i, col j) sits at (x=j, y=i)."""
    c, s = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    u = dx * c + dy * s
    v = dy * c - dx * s
    return (u / a) ** 2 + (v / b) ** 2


def _smooth_noise(rng, size, cells, channels):
    # bilinear upsampling of a coarse random grid
    grid = rng.random((cells + 1, cells + 1, channels))
    pos = np.linspace(0, cells, size)
    i0 = np.minimum(np.floor(pos).astype(int), cells - 1)
    f = (pos - i0)[:, None]
    rows = grid[i0] * (1 - f[:, :, None]) + grid[i0 + 1] * f[:, :, None]
    cols = rows[:, i0] * (1 - f[None, :, :]) + rows[:, i0 + 1] * f[None, :, :]
    return cols


def _draw_ellipses(rng, size):
    while True:
        ellipses = []
        for _ in range(int(rng.integers(1, 4))):
            a = float(rng.uniform(0.08, 0.28) * size)
            b = float(rng.uniform(0.6, 1.0) * a)
            ellipses.append({
                "cx": float(rng.uniform(0.2, 0.8) * size),
                "cy": float(rng.uniform(0.2, 0.8) * size),
                "a": a,
                "b": b,
                "theta": float(rng.uniform(0.0, math.pi)),
            })
        fields = [ellipse_field(size, size, **e) for e in ellipses]
        mask = np.zeros((size, size), dtype=bool)
        for f in fields:
            mask |= f <= 1.0
        if MIN_FRACTION <= mask.mean() <= MAX_FRACTION:
            return ellipses, fields, mask


def generate_sample(rng: np.random.Generator, size: int):
    """Return (image H x W x 3 in [0,1], mask H x W x 1, ellipse list)."""
    base = np.array([0.75, 0.45, 0.40]) + rng.uniform(-0.08, 0.08, 3)
    background = base + 0.25 * (_smooth_noise(rng, size, 4, 3) - 0.5)
    background += 0.03 * rng.standard_normal((size, size, 3))

    ellipses, fields, mask = _draw_ellipses(rng, size)
    image = background
    for f in fields:
        tint = np.array([0.95, 0.55, 0.35]) + rng.uniform(-0.05, 0.05, 3)
        texture = 0.12 * (_smooth_noise(rng, size, max(4, size // 6), 1) - 0.5)
        polyp = tint + texture - 0.15 * np.clip(f, 0, 1)[:, :, None]
        alpha = np.clip((1.0 - np.sqrt(f)) / 0.08 + 0.5, 0.0, 1.0)[:, :, None]
        image = image * (1 - alpha) + polyp * alpha

    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(1, 5))):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.5, 1.8) * size / 64
        spot = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r))
        image = image + 0.6 * spot[:, :, None]
    image = np.clip(image, 0.0, 1.0)
    return image, mask.astype(np.float32)[:, :, None], ellipses


def synth_generate(root: str, count: int, size: int = 64, seed: int = 0, split_seed: int = 0) -> Path:
    """Write ``count`` samples plus ``manifest.jsonl`` and ``meta.jsonl`` under ``root``."""
    if size < 32:
        raise ValueError(f"synthetic images must be at least 32 px, got {size}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(count)
    width = max(4, len(str(count - 1)))
    ids = []
    with open(root / "meta.jsonl", "w") as meta:
        for k, ss in enumerate(seeds):
            ident = f"synth_{k:0{width}d}"
            image, mask, ellipses = generate_sample(np.random.default_rng(ss), size)
            write_image(root / "images" / f"{ident}.png", image)
            write_mask(root / "masks" / f"{ident}.png", mask)
            meta.write(json.dumps({"id": ident, "size": size, "ellipses": ellipses}) + "\n")
            ids.append(ident)
    if count >= 10:
        split(ids, seed=split_seed, root=str(root)).write()
    return root
