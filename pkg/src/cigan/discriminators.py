"""Multi-scale feature pyramid discriminator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .spectral import add_spectral_norm

DISC_WIDTHS = (64, 128, 256, 512, 512)
HEAD_STAGES = (3, 4, 5)


@dataclass
class ScoreSet:
    """Raw patch logits, one map per pyramid level."""

    levels: list[torch.Tensor]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("ScoreSet needs at least one level")

    @property
    def aggregate(self) -> torch.Tensor:
        """Per-image score: levels weighted equally, each averaged over its patches."""
        return torch.stack([lv.flatten(1).mean(dim=1) for lv in self.levels]).mean(dim=0)

    def detach(self) -> "ScoreSet":
        return ScoreSet([lv.detach() for lv in self.levels])


class MultiScaleDiscriminator(nn.Module):
    """Five stride-2 conv blocks; 1x1 heads on the deeper stages emit patch logits.

    A 64x64 input yields 8x8, 4x4 and 2x2 logit maps. ``pyramid=False``
    keeps only the last head.
    """

    def __init__(
        self,
        widths: Sequence[int] = DISC_WIDTHS,
        pyramid: bool = True,
        zero_init_heads: bool = False,
        spectral: bool = True,
    ):
        super().__init__()
        blocks, c_in = [], 3
        for w in widths:
            blocks.append(nn.Conv2d(c_in, w, 4, stride=2, padding=1))
            c_in = w
        self.blocks = nn.ModuleList(blocks)
        self.head_stages = HEAD_STAGES if pyramid else (len(widths),)
        self.heads = nn.ModuleDict({str(s): nn.Conv2d(widths[s - 1], 1, 1) for s in self.head_stages})
        if zero_init_heads:
            for h in self.heads.values():
                nn.init.zeros_(h.weight)
                nn.init.zeros_(h.bias)
        if spectral:
            add_spectral_norm(self)

    def forward(self, img: torch.Tensor) -> ScoreSet:
        if img.dim() != 4 or img.shape[1] != 3 or min(img.shape[-2:]) < 32:
            raise ValueError(f"discriminator expects (B, 3, >=32, >=32), got {tuple(img.shape)}")
        x, levels = img, []
        for s, block in enumerate(self.blocks, start=1):
            x = F.leaky_relu(block(x), 0.2)
            if str(s) in self.heads:
                levels.append(self.heads[str(s)](x))
        return ScoreSet(levels)


def mfpd_score(img: torch.Tensor, disc: MultiScaleDiscriminator) -> ScoreSet:
    return disc(img)
