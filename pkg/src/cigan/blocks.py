"""Feature-level building blocks shared by the two generators.

* :class:`LowLightGuidedTransform` - elementwise affine modulation of content
  features by maps predicted from reference (low-light) features.
* :class:`FeaturePerturbation` - learnable Gaussian scale/shift noise.
* :class:`DualAttention` - channel then spatial squeeze-excitation gating.
* :func:`lip_fuse` - logarithmic-image-processing addition on ``[0, 1]``.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

STD_EPS = 1e-10


class LowLightGuidedTransform(nn.Module):
    def __init__(self, channels: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or channels
        self.shared = nn.Conv2d(channels, hidden, 3, padding=1)
        self.w_conv = nn.Conv2d(hidden, channels, 3, padding=1)
        self.b_conv = nn.Conv2d(hidden, channels, 3, padding=1)
        # start close to an identity scale
        nn.init.ones_(self.w_conv.bias)
        nn.init.zeros_(self.b_conv.bias)

    def affine(self, reference: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.leaky_relu(self.shared(reference), 0.2)
        return self.w_conv(h), self.b_conv(h)

    def forward(self, content: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        if content.shape != reference.shape:
            raise ValueError(
                f"LGT content {tuple(content.shape)} and reference {tuple(reference.shape)} differ"
            )
        w, b = self.affine(reference)
        return content * w + b


def lgt_modulate(content: torch.Tensor, reference: torch.Tensor, module: LowLightGuidedTransform) -> torch.Tensor:
    return module(content, reference)


class FeaturePerturbation(nn.Module):
    """``x -> (1 + theta1 * alpha) * x + theta2 * beta``.

    ``alpha`` is drawn per (sample, channel) and ``beta`` per (sample, pixel),
    alpha first. Pass ``noise=(alpha, beta)`` to replay a fixed draw.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.theta1 = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.theta2 = nn.Parameter(torch.zeros(1, channels, 1, 1))

    @staticmethod
    def sample(x: torch.Tensor, rng: Optional[torch.Generator]) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, h, w = x.shape
        alpha = torch.randn(b, c, 1, 1, generator=rng, dtype=x.dtype)
        beta = torch.randn(b, 1, h, w, generator=rng, dtype=x.dtype)
        return alpha.to(x.device), beta.to(x.device)

    def forward(
        self,
        x: torch.Tensor,
        rng: Optional[torch.Generator] = None,
        noise: Optional[tuple[torch.Tensor, torch.Tensor]] = None,
    ) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.theta1.shape[1]:
            raise ValueError(f"FRP expects (B, {self.theta1.shape[1]}, H, W), got {tuple(x.shape)}")
        alpha, beta = noise if noise is not None else self.sample(x, rng)
        return (1 + self.theta1 * alpha) * x + self.theta2 * beta


def frp_perturb(x, module: FeaturePerturbation, rng=None, noise=None):
    return module(x, rng=rng, noise=noise)


def spatial_squeeze(x: torch.Tensor) -> torch.Tensor:
    """Channel-wise average and max, stacked to ``(B, 2, H, W)``."""
    # reducing a contiguous trailing axis sums every pixel in the same order,
    # so a spatially constant input gives an exactly constant map
    t = x.permute(0, 2, 3, 1).contiguous()
    return torch.stack([t.mean(dim=-1), t.amax(dim=-1)], dim=1)


def channel_squeeze(x: torch.Tensor) -> torch.Tensor:
    """Spatial mean and unbiased std per channel, stacked to ``(B, 2C, 1, 1)``."""
    n = x.shape[-2] * x.shape[-1]
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = (x - mean).pow(2).sum(dim=(2, 3), keepdim=True) / (n - 1)
    std = torch.sqrt(var + STD_EPS)
    return torch.cat([mean, std], dim=1)


class DualAttention(nn.Module):
    """Channel attention followed by spatial attention, with a residual path.

    ``out = x + x * ca(x) * sa(x * ca(x))`` where both gates are sigmoids, so the
    gated branch never exceeds ``|x|`` in magnitude.
    """

    def __init__(self, channels: int, reduction: int = 16, spatial_hidden: int = 8):
        super().__init__()
        mid = max(channels // reduction, 4)
        self.ca = nn.Sequential(
            nn.Conv2d(2 * channels, mid, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(mid, channels, 1),
        )
        self.sa = nn.Sequential(
            nn.Conv2d(2, spatial_hidden, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(spatial_hidden, 1, 3, padding=1),
        )

    def gates(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        ca = torch.sigmoid(self.ca(channel_squeeze(x)))
        sa = torch.sigmoid(self.sa(spatial_squeeze(x * ca)))
        return ca, sa

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[-2] * x.shape[-1] < 2:
            raise ValueError(f"DAM needs at least two spatial positions, got {tuple(x.shape)}")
        ca, sa = self.gates(x)
        return x + x * ca * sa


def dam_attend(x: torch.Tensor, module: DualAttention) -> torch.Tensor:
    return module(x)


def lip_fuse(a: torch.Tensor, b: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """``(a + b) / (lam + a * b)``; closed on ``[0, 1]`` for ``lam = 1``."""
    if lam < 1:
        raise ValueError(f"lip_fuse requires lambda >= 1, got {lam}")
    if a.shape != b.shape:
        raise ValueError(f"lip_fuse shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a + b) / (lam + a * b)
