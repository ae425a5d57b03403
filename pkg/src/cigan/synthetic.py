"""Procedural unpaired normal/low-light image sets for smoke runs and tests.

Normal-light scenes are smooth color gradients with a few bright shapes.
Low-light scenes are independently drawn scenes, darkened and given
signal-dependent noise, so the two partitions never share content.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _scene(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b, d = rng.uniform(-0.4, 0.4, 3)
        img[..., c] = 0.5 + a * xx + b * yy + d * np.sin(2 * np.pi * rng.uniform(1, 3) * (xx + yy))
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size / 12, size / 4)
        mask = (yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2 < r**2
        img[mask] = rng.uniform(0.2, 1.0, 3)
    return np.clip(img, 0.0, 1.0)


def normal_image(rng: np.random.Generator, size: int) -> np.ndarray:
    return _scene(rng, size)


def low_image(rng: np.random.Generator, size: int) -> np.ndarray:
    img = _scene(rng, size) * rng.uniform(0.08, 0.2)
    noise = rng.normal(0.0, 1.0, img.shape) * np.sqrt(0.0004 + 0.01 * img)
    return np.clip(img + noise, 0.0, 1.0)


def _write(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.floor(arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def make_unpaired_set(root, n_normal: int = 32, n_low: int = 32, size: int = 128, seed: int = 0) -> tuple[Path, Path]:
    """Write ``root/normal`` and ``root/low`` and return both directories."""
    root = Path(root)
    normal_dir, low_dir = root / "normal", root / "low"
    normal_dir.mkdir(parents=True, exist_ok=True)
    low_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_normal):
        _write(normal_image(rng, size), normal_dir / f"n{i:04d}.png")
    for i in range(n_low):
        _write(low_image(rng, size), low_dir / f"l{i:04d}.png")
    return normal_dir, low_dir
