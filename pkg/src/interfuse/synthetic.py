"""Deterministic synthetic registered image pairs.

Both modalities render one latent scene (smooth background plus shapes).
The visible image adds colour and fine texture; the infrared image adds warm
blobs the visible image lacks and flattens texture.  ``disagreement`` scales
how far the two luminances drift apart.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import PairEntry, luma_chroma_to_rgb, save_image


def _grid(h, w):
    return np.mgrid[0:h, 0:w].astype(np.float64) / max(h, w)


def render_scene(rng: np.random.Generator, h: int, w: int):
    """Returns ``(scene, labels, shapes)``: luminance in ~[0.2, 0.8] and per-shape masks."""
    yy, xx = _grid(h, w)
    scene = 0.45 + 0.15 * (rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx)
    scene += 0.04 * np.sin(2 * np.pi * (rng.uniform(1, 3) * xx + rng.uniform(0, 1)))
    shapes = []
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0.1, 0.9, size=2) * (h / max(h, w), w / max(h, w))
        ry, rx = rng.uniform(0.05, 0.2, size=2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        level = rng.uniform(0.25, 0.75)
        scene = np.where(mask, level, scene)
        shapes.append(mask)
    return np.clip(scene, 0.15, 0.85), shapes


def _smooth_noise(rng, h, w, cells):
    coarse = rng.normal(size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0, x0 = np.floor(ys).astype(int).clip(0, cells - 1), np.floor(xs).astype(int).clip(0, cells - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx)


def make_pair(seed: int, height: int = 128, width: int = 128, disagreement: float = 1.0):
    """One synthetic pair as float arrays: visible ``[3,H,W]`` and infrared ``[1,H,W]``."""
    rng = np.random.default_rng(seed)
    scene, shapes = render_scene(rng, height, width)
    yy, xx = _grid(height, width)

    texture = 0.025 * np.sin(2 * np.pi * 18 * (xx + 0.5 * yy)) * (_smooth_noise(rng, height, width, 4) > 0)
    vis_luma = scene + disagreement * texture
    chroma = np.zeros((2, height, width))
    for mask in shapes:
        chroma[:, mask] = rng.uniform(-0.08, 0.08, size=(2, 1))
    chroma += 0.5
    visible = np.clip(luma_chroma_to_rgb(vis_luma[None], chroma), 0.0, 1.0)

    heat = np.zeros_like(scene)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.15, 0.85, size=2) * (height / max(height, width), width / max(height, width))
        r = rng.uniform(0.03, 0.08)
        heat += np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r ** 2)))
    infrared = 0.95 * scene + 0.02 + disagreement * 0.08 * np.clip(heat, 0, 1.5)
    infrared += disagreement * 0.015 * _smooth_noise(rng, height, width, 3)
    return visible.astype(np.float32), np.clip(infrared, 0.0, 1.0)[None].astype(np.float32)


def make_gray_pair(seed: int, height: int = 96, width: int = 96):
    """A registered grayscale pair unlike the training scenes (anatomy-like rings vs. hot spots)."""
    rng = np.random.default_rng(seed)
    yy, xx = _grid(height, width)
    cy, cx = 0.5 * height / max(height, width), 0.5 * width / max(height, width)
    rad = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    structural = np.where(rad < 0.42, 0.35 + 0.25 * np.cos(rad * rng.uniform(25, 40)) ** 2, 0.05)
    functional = np.where(rad < 0.42, 0.2, 0.02)
    for _ in range(3):
        py, px = rng.uniform(0.3, 0.7, size=2)
        functional += 0.6 * np.exp(-(((yy - py) ** 2 + (xx - px) ** 2) / (2 * 0.05 ** 2)))
    structural = np.clip(structural, 0, 1)[None]
    return np.repeat(structural, 3, axis=0).astype(np.float32), np.clip(functional, 0, 1)[None].astype(np.float32)


def write_dataset(root, n: int = 8, height: int = 128, width: int = 128, seed: int = 0,
                  disagreement: float = 1.0) -> list[PairEntry]:
    """Write ``n`` pairs as ``root/vi/<id>.png`` and ``root/ir/<id>.png``."""
    root = Path(root)
    entries = []
    for i in range(n):
        pid = f"pair_{i:03d}"
        vis, ir = make_pair(seed * 1000 + i, height, width, disagreement)
        vp = save_image(root / "vi" / f"{pid}.png", vis)
        ip = save_image(root / "ir" / f"{pid}.png", ir)
        entries.append(PairEntry(pid, vp, ip))
    return entries
