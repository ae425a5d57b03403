"""Full-reference quality metrics: PSNR, SSIM and their gamma-corrected variants.

Inputs may be torch tensors or numpy arrays shaped ``(H, W)``, ``(C, H, W)``
or ``(1, C, H, W)`` with values in ``[0, 1]``. SSIM is computed on the
unweighted channel mean.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import correlate

from .imaging import IMAGE_EXTENSIONS, load_image

PSNR_IDENTICAL = math.inf
GAMMA_GRID = tuple(np.round(np.arange(0.10, 5.0 + 1e-9, 0.05), 2).tolist())

K1, K2 = 0.01, 0.03
WIN_SIZE, WIN_SIGMA = 11, 1.5


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("metrics take one image at a time")
        x = x[0]
    return x


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0 over all channels; ``inf`` for identical inputs."""
    a, b = _as_array(a), _as_array(b)
    _same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(1.0 / mse))


def _gray(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=0) if x.ndim == 3 else x


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM, Gaussian 11x11 window (sigma 1.5), mean over valid positions."""
    a, b = _as_array(a), _as_array(b)
    _same_shape(a, b)
    x, y = _gray(a), _gray(b)
    if min(x.shape) < WIN_SIZE:
        raise ValueError(f"image {x.shape} smaller than the {WIN_SIZE}x{WIN_SIZE} SSIM window")
    w = gaussian_window()

    def filt(z):
        return correlate(z, w, mode="valid", method="direct")

    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def gamma_correct_best(pred, ref, gammas: Sequence[float] = GAMMA_GRID) -> tuple[float, np.ndarray]:
    """Exhaustive gamma sweep maximising PSNR of ``pred ** gamma`` against ``ref``.

    Ties keep the earliest gamma in the grid. ``1.0`` is always tried.
    """
    p, r = _as_array(pred), _as_array(ref)
    _same_shape(p, r)
    p = np.clip(p, 0.0, 1.0)
    grid = list(gammas)
    if 1.0 not in grid:
        grid.append(1.0)
    best_g, best_score = 1.0, psnr(p, r)
    for g in grid:
        score = psnr(p**g, r)
        if score > best_score:
            best_g, best_score = g, score
    return float(best_g), p**best_g


@dataclass
class MetricRow:
    name: str
    psnr: float
    psnr_gc: float
    ssim: float
    ssim_gc: float
    gamma: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def mean(self, key: str) -> float:
        vals = [getattr(r, key) for r in self.rows]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def means(self) -> dict[str, float]:
        return {k: self.mean(k) for k in ("psnr", "psnr_gc", "ssim", "ssim_gc", "gamma")}

    def write_csv(self, path) -> None:
        keys = ["psnr", "psnr_gc", "ssim", "ssim_gc", "gamma"]
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["name", *keys])
            for r in self.rows:
                w.writerow([r.name, *(repr(float(getattr(r, k))) for k in keys)])
            w.writerow(["MEAN", *(repr(self.mean(k)) for k in keys)])


def evaluate_pair(name: str, pred, ref) -> MetricRow:
    gamma, corrected = gamma_correct_best(pred, ref)
    return MetricRow(
        name=name,
        psnr=psnr(pred, ref),
        psnr_gc=psnr(corrected, ref),
        ssim=ssim(pred, ref),
        ssim_gc=ssim(corrected, ref),
        gamma=gamma,
    )


def _images_by_name(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise NotADirectoryError(f"not a directory: {directory}")
    return {p.name: p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS}


def evaluate_dir(pred_dir, gt_dir) -> MetricReport:
    """Score every prediction against the ground truth with the same file name."""
    preds = _images_by_name(Path(pred_dir))
    gts = _images_by_name(Path(gt_dir))
    if not preds:
        raise FileNotFoundError(f"no images in {pred_dir}")
    report = MetricReport()
    for name in sorted(preds):
        if name not in gts:
            raise FileNotFoundError(f"no ground truth for {name} in {gt_dir}")
        p, g = load_image(preds[name]), load_image(gts[name])
        if p.shape != g.shape:
            raise ValueError(f"{name}: shape {tuple(p.shape)} vs ground truth {tuple(g.shape)}")
        report.rows.append(evaluate_pair(name, p, g))
    return report
