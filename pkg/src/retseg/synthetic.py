"""Synthetic vessel-like images for desk-scale runs and tests.

Each sample draws a few smooth dark curves on a bright background, roughly the
look of vessels in a fundus green channel, paired with the exact curve mask.
Everything is keyed by an integer seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .image_core import BinaryMask, GrayImage, save_image


def vessel_pair(size: int = 64, seed: int = 0, n_vessels: int = 3) -> tuple[GrayImage, BinaryMask]:
    """One synthetic image/mask pair with `n_vessels` curvy vessels."""
    rng = np.random.Generator(np.random.PCG64(seed))
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]

    for _ in range(n_vessels):
        # random smooth parametric curve crossing the frame
        horizontal = rng.random() < 0.5
        amp = rng.uniform(0.08, 0.22) * size
        freq = rng.uniform(0.7, 1.6)
        phase = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(0.25, 0.75) * size
        thickness = rng.uniform(1.2, 2.2)
        t = np.linspace(0, size - 1, 4 * size)
        wave = offset + amp * np.sin(2 * np.pi * freq * t / size + phase)
        if horizontal:
            cx, cy = t, wave
        else:
            cx, cy = wave, t
        for px, py in zip(cx, cy):
            d2 = (xx - px) ** 2 + (yy - py) ** 2
            mask[d2 <= thickness**2] = 1

    background = 0.62 + 0.10 * np.sin(2 * np.pi * xx / size) * np.cos(2 * np.pi * yy / size)
    img = background - 0.38 * mask
    img += rng.normal(0.0, 0.01, size=img.shape)
    return GrayImage(np.clip(img, 0.0, 1.0).astype(np.float32)), BinaryMask(mask)


def write_synthetic_dataset(root, count: int = 40, size: int = 64, seed: int = 0) -> None:
    """Materialize a `<root>/images` + `<root>/masks` PNG dataset."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(count):
        img, mask = vessel_pair(size=size, seed=seed + i)
        save_image(img, root / "images" / f"synth_{i:03d}.png")
        save_image(mask, root / "masks" / f"synth_{i:03d}.png")
