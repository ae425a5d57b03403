"""Training objectives and the per-step loss record."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .discriminators import ScoreSet
from .imaging import to_grayscale


@dataclass
class LossBundle:
    lg_adv_L: float = 0.0
    lg_adv_N: float = 0.0
    l_exp: float = 0.0
    l_con: float = 0.0
    l_per: float = 0.0
    lg_total: float = 0.0
    ld_L: float = 0.0
    ld_N: float = 0.0
    ld_total: float = 0.0

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def exposure_loss(
    img: torch.Tensor,
    e: float = 0.1,
    sigma: float = 0.1,
    window: int = 7,
    gray: bool = True,
) -> torch.Tensor:
    """Gaussian penalty on the mean intensity of non-overlapping ``window``-sized regions.

    Edge regions that do not fill a whole window are averaged over the pixels
    they do contain. With ``gray=False`` each channel is scored separately.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    x = to_grayscale(img) if gray else img
    region_mean = F.avg_pool2d(x, window, stride=window, ceil_mode=True)
    return (1.0 - torch.exp(-((region_mean - e) ** 2) / (2.0 * sigma**2))).mean()


def _check_pair(fake: ScoreSet, real: ScoreSet) -> None:
    if not fake.levels or not real.levels or len(fake.levels) != len(real.levels):
        raise ValueError("score sets must be non-empty and from the same discriminator")


def _rahinge(fake: ScoreSet, real: ScoreSet, sign: float) -> torch.Tensor:
    _check_pair(fake, real)
    per_level = []
    for f, r in zip(fake.levels, real.levels):
        f_rel = f - r.mean()
        r_rel = r - f.mean()
        per_level.append(F.relu(1.0 - sign * f_rel).mean() + F.relu(1.0 + sign * r_rel).mean())
    return torch.stack(per_level).mean()


def rahinge_generator_loss(fake: ScoreSet, real: ScoreSet) -> torch.Tensor:
    """Relativistic average hinge loss for the generator.

    Evaluated per pyramid level over all patch logits, then averaged over levels.
    """
    return _rahinge(fake, real, 1.0)


def rahinge_discriminator_loss(fake: ScoreSet, real: ScoreSet) -> torch.Tensor:
    return _rahinge(fake, real, -1.0)


def rms(x: torch.Tensor) -> torch.Tensor:
    """Root mean square with a finite gradient at zero."""
    ms = x.pow(2).mean()
    return torch.where(ms > 0, ms.clamp_min(1e-30).sqrt(), ms)


def cycle_losses(
    in_n: torch.Tensor,
    cyc_n: torch.Tensor,
    in_l: torch.Tensor,
    cyc_l: torch.Tensor,
    features: Callable[[torch.Tensor], torch.Tensor],
    in_n_feat: Optional[torch.Tensor] = None,
    in_l_feat: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """L1 cycle loss and RMS feature (perceptual) loss over both cycles.

    ``features`` maps an image to its perceptual feature map. Features of the
    inputs may be passed in precomputed.
    """
    if in_n.shape != cyc_n.shape or in_l.shape != cyc_l.shape:
        raise ValueError("cycle loss inputs must match pairwise in shape")
    l_con = (in_n - cyc_n).abs().mean() + (in_l - cyc_l).abs().mean()
    fn = features(in_n) if in_n_feat is None else in_n_feat
    fl = features(in_l) if in_l_feat is None else in_l_feat
    l_per = rms(fn - features(cyc_n)) + rms(fl - features(cyc_l))
    return l_con, l_per


DEFAULT_WEIGHTS = (10.0, 10.0, 1.0)


def generator_objective(lg_adv_L, lg_adv_N, l_exp, l_con, l_per, weights=DEFAULT_WEIGHTS):
    """Weighted generator total; works on floats and tensors alike."""
    w_exp, w_con, w_per = weights
    return lg_adv_L + lg_adv_N + w_exp * l_exp + w_con * l_con + w_per * l_per


def total_generator_loss(b: LossBundle, weights: tuple[float, float, float] = DEFAULT_WEIGHTS) -> float:
    return generator_objective(b.lg_adv_L, b.lg_adv_N, b.l_exp, b.l_con, b.l_per, weights)


def total_discriminator_loss(b: LossBundle) -> float:
    return b.ld_L + b.ld_N
