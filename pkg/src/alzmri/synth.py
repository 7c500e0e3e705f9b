"""Synthetic stand-in dataset: ellipses with zero, one or two voids."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .layers import RngState

SIZE = 128
CLASS_NAMES = ("class0_solid", "class1_one_void", "class2_two_voids")


def render(cls: int, rng: np.random.Generator, size: int = SIZE) -> np.ndarray:
    """One 8-bit grayscale image of class ``cls``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    ay = rng.uniform(0.28, 0.36) * size
    ax = rng.uniform(0.22, 0.32) * size
    ell = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
    img = np.where(ell <= 1, rng.uniform(0.55, 0.8), 0.08)
    img = img + 0.1 * np.clip(1 - ell, 0, 1)

    n_voids = {0: 0, 1: 1, 2: 2}[cls]
    start = rng.uniform(0, 2 * np.pi)
    for i in range(n_voids):
        # off-centre voids; two voids sit on roughly opposite sides
        ang = start + i * np.pi + rng.uniform(-0.4, 0.4)
        r = rng.uniform(0.35, 0.55)
        vy = cy + r * ay * np.sin(ang)
        vx = cx + r * ax * np.cos(ang)
        vr = rng.uniform(0.07, 0.1) * size
        img = np.where((yy - vy) ** 2 + (xx - vx) ** 2 <= vr**2, 0.12, img)
    img = img + rng.normal(0, 0.06, size=img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(out_dir, classes: int = 3, per_class: int = 80, seed: int = 0, size: int = SIZE) -> Path:
    """Write ``out_dir/<class>/<nnn>.png``; output bytes depend only on the arguments."""
    if not 2 <= classes <= len(CLASS_NAMES):
        raise ValueError(f"classes must be in [2, {len(CLASS_NAMES)}]")
    out = Path(out_dir)
    base = RngState(seed, stream=11)
    for c in range(classes):
        d = out / CLASS_NAMES[c]
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = render(c, base.split(c, i).generator, size)
            Image.fromarray(img, mode="L").save(d / f"{i:03d}.png", format="PNG", optimize=False)
    return out
