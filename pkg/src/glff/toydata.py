"""Procedural toy real/fake image set.

"Real" images are smooth random colour fields with sensor-like noise. "Fake"
images come from the same process plus a faint periodic pattern of the kind
left behind by transposed-convolution upsampling in image generators.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import save_image


def smooth_field(rng, size: int) -> np.ndarray:
    coarse = rng.uniform(0, 255, size=(size // 16, size // 16, 3))
    field = ndimage.zoom(coarse, (16, 16, 1), order=3, mode="reflect")[:size, :size]
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(10, 30, size=3)
        field += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[..., None] * amp
    return field


def upsampling_artifact(rng, size: int, amplitude: float) -> np.ndarray:
    period = 2 if rng.random() < 0.5 else 4
    tile = rng.normal(0, 1, size=(period, period, 3))
    tile -= tile.mean(axis=(0, 1))
    tile /= np.abs(tile).max()
    reps = size // period
    return np.tile(tile, (reps, reps, 1)) * amplitude


def toy_image(rng, size: int = 128, fake: bool = False, amplitude: float = 10.0) -> np.ndarray:
    img = smooth_field(rng, size) + rng.normal(0, 3, size=(size, size, 3))
    if fake:
        img += upsampling_artifact(rng, size, amplitude)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_toy_set(out_dir, n_real: int = 16, n_fake: int = 16, size: int = 128, seed: int = 0):
    """Write ``real/`` and ``fake/`` PNG folders; returns (real_dir, fake_dir)."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    for name, count, fake in (("real", n_real, False), ("fake", n_fake, True)):
        for i in range(count):
            save_image(out_dir / name / f"{name}_{i:03d}.png", toy_image(rng, size, fake))
    return out_dir / "real", out_dir / "fake"
