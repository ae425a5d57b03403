"""Degradation (normal -> low) and enhancement (low -> normal) generators.

Both generators decode the frozen encoder pyramid coarse-to-fine. The
degradation generator additionally modulates the normal-light pyramid with
reference low-light features (LGT) and perturbs every decoder stage (FRP).
The enhancement generator fuses its decoder output with the input through
LIP addition.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import DualAttention, FeaturePerturbation, LowLightGuidedTransform, lip_fuse
from .encoder import PYRAMID_CHANNELS
from .spectral import add_spectral_norm

DECODER_WIDTHS = (512, 512, 256, 128, 64)  # coarsest stage first


class DecoderStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, use_dam: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.dam = DualAttention(c_out) if use_dam else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.conv1(x), 0.2)
        x = F.leaky_relu(self.conv2(x), 0.2)
        if self.dam is not None:
            x = self.dam(x)
        return x


class PyramidDecoder(nn.Module):
    """Five stages from scale 5 up to scale 1, then a 3x3 head to RGB.

    Stage ``i`` takes the scale-``i`` encoder feature concatenated with the
    nearest-upsampled output of the previous (coarser) stage.
    """

    def __init__(
        self,
        widths: Sequence[int] = DECODER_WIDTHS,
        use_dam: bool = True,
        use_frp: bool = False,
        head: str = "sigmoid",
    ):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("decoder needs exactly five stage widths")
        enc = PYRAMID_CHANNELS[::-1]
        stages, prev = [], 0
        for c_enc, c_out in zip(enc, widths):
            stages.append(DecoderStage(c_enc + prev, c_out, use_dam))
            prev = c_out
        self.stages = nn.ModuleList(stages)
        self.frp = nn.ModuleList(FeaturePerturbation(w) for w in widths) if use_frp else None
        self.head = nn.Conv2d(widths[-1], 3, 3, padding=1)
        self.head_act = head

    def forward(
        self,
        feats: Sequence[torch.Tensor],
        rng: Optional[torch.Generator] = None,
        perturb: bool = True,
    ) -> torch.Tensor:
        x = None
        for k, (stage, skip) in enumerate(zip(self.stages, reversed(feats))):
            if x is not None:
                x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
                skip = torch.cat([skip, x], dim=1)
            x = stage(skip)
            if self.frp is not None and perturb:
                x = self.frp[k](x, rng=rng)
        out = self.head(x)
        return torch.sigmoid(out) if self.head_act == "sigmoid" else torch.tanh(out)


def _check_pyramid(feats: Sequence[torch.Tensor]) -> None:
    if len(feats) != 5:
        raise ValueError(f"expected a 5-level pyramid, got {len(feats)} levels")


class DegradationGenerator(nn.Module):
    def __init__(
        self,
        widths: Sequence[int] = DECODER_WIDTHS,
        use_lgt: bool = True,
        use_frp: bool = True,
        use_dam: bool = True,
        spectral: bool = True,
    ):
        super().__init__()
        self.lgt = nn.ModuleList(LowLightGuidedTransform(c) for c in PYRAMID_CHANNELS) if use_lgt else None
        self.decoder = PyramidDecoder(widths, use_dam=use_dam, use_frp=use_frp)
        if spectral:
            add_spectral_norm(self)

    def forward(
        self,
        normal_feats: Sequence[torch.Tensor],
        ref_feats: Sequence[torch.Tensor],
        rng: Optional[torch.Generator] = None,
        deterministic: bool = False,
    ) -> torch.Tensor:
        _check_pyramid(normal_feats)
        _check_pyramid(ref_feats)
        if self.lgt is not None:
            normal_feats = [t(n, r) for t, n, r in zip(self.lgt, normal_feats, ref_feats)]
        return self.decoder(normal_feats, rng=rng, perturb=not deterministic)


class EnhancementGenerator(nn.Module):
    """Decoder plus fusion with the low-light input.

    With ``use_lip`` the decoder output ``d`` in ``[0, 1]`` is LIP-added to the
    input; otherwise a ``tanh`` residual is added and the sum clamped.
    """

    def __init__(
        self,
        widths: Sequence[int] = DECODER_WIDTHS,
        use_dam: bool = True,
        use_lip: bool = True,
        lip_lambda: float = 1.0,
        spectral: bool = True,
    ):
        super().__init__()
        if lip_lambda < 1:
            raise ValueError(f"lip_lambda must be >= 1, got {lip_lambda}")
        self.use_lip = use_lip
        self.lip_lambda = lip_lambda
        self.decoder = PyramidDecoder(widths, use_dam=use_dam, head="sigmoid" if use_lip else "tanh")
        if spectral:
            add_spectral_norm(self)

    def decode(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        _check_pyramid(feats)
        return self.decoder(feats)

    def forward(self, low_feats: Sequence[torch.Tensor], low: torch.Tensor) -> torch.Tensor:
        out = self.decode(low_feats)
        if self.use_lip:
            return lip_fuse(out, low, self.lip_lambda)
        return (low + out).clamp(0.0, 1.0)
