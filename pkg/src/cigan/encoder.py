"""Frozen VGG-19 feature pyramid.

The backbone is the VGG-19 convolutional trunk up to ``relu5_1``. Weights come
either from a checkpoint-container asset (torchvision ``features.N.weight``
naming) or from a seeded random initialisation used for desk-scale runs and
tests. Weights live in non-persistent buffers: they never reach an optimizer
and are never written into training checkpoints.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

TAPS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
PYRAMID_CHANNELS = (64, 128, 256, 512, 512)
MIN_SIZE = 32

# VGG-19 trunk through conv5_1; "M" is a 2x2 max-pool.
_VGG19_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512)
# index into torchvision's vgg19().features for each conv above
_TORCHVISION_CONV_INDEX = (0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28)
# conv ordinal (0-based) whose ReLU output is each tap
_TAP_CONV = {"relu1_1": 0, "relu2_1": 2, "relu3_1": 4, "relu4_1": 8, "relu5_1": 12}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _conv_shapes() -> list[tuple[int, int]]:
    shapes, c_in = [], 3
    for item in _VGG19_CFG:
        if item == "M":
            continue
        shapes.append((item, c_in))
        c_in = item
    return shapes


def random_backbone_weights(seed: int = 0) -> dict[str, torch.Tensor]:
    """Deterministic VGG-19-shaped weights: He-normal kernels, N(0, 0.05) biases.

    Nonzero biases keep a zero image from mapping to an all-zero pyramid.
    """
    g = torch.Generator().manual_seed(seed)
    weights = {}
    for idx, (c_out, c_in) in zip(_TORCHVISION_CONV_INDEX, _conv_shapes()):
        std = (2.0 / (c_in * 9)) ** 0.5
        weights[f"features.{idx}.weight"] = torch.randn(c_out, c_in, 3, 3, generator=g) * std
        weights[f"features.{idx}.bias"] = torch.randn(c_out, generator=g) * 0.05
    return weights


class VGGEncoder(nn.Module):
    """Multi-scale feature extractor returning post-ReLU activations at the five taps.

    Pooling uses ``ceil_mode`` so the scale-``i`` map is ``ceil(H / 2**(i-1))``
    on each side.
    """

    def __init__(self, weights: dict[str, torch.Tensor], normalize: bool = False):
        super().__init__()
        for n, (idx, (c_out, c_in)) in enumerate(zip(_TORCHVISION_CONV_INDEX, _conv_shapes())):
            w = weights[f"features.{idx}.weight"].detach().float()
            b = weights[f"features.{idx}.bias"].detach().float()
            if w.shape != (c_out, c_in, 3, 3) or b.shape != (c_out,):
                raise ValueError(f"backbone tensor features.{idx} has wrong shape {tuple(w.shape)}")
            self.register_buffer(f"w{n}", w.clone(), persistent=False)
            self.register_buffer(f"b{n}", b.clone(), persistent=False)
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    @classmethod
    def random(cls, seed: int = 0) -> "VGGEncoder":
        return cls(random_backbone_weights(seed), normalize=False)

    @classmethod
    def from_archive(cls, path) -> "VGGEncoder":
        """Load pretrained weights stored in the checkpoint container format."""
        from .checkpoint import read_archive

        tensors, _ = read_archive(path)
        return cls(tensors, normalize=True)

    def _run(self, x: torch.Tensor, last_tap: str) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"encoder expects (B, 3, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < MIN_SIZE:
            raise ValueError(f"encoder input must be at least {MIN_SIZE}x{MIN_SIZE}, got {tuple(x.shape[-2:])}")
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        stop = _TAP_CONV[last_tap]
        tap_at = {v: k for k, v in _TAP_CONV.items()}
        feats, conv = [], 0
        for item in _VGG19_CFG:
            if item == "M":
                x = F.max_pool2d(x, 2, 2, ceil_mode=True)
                continue
            w = getattr(self, f"w{conv}").to(x.dtype)
            b = getattr(self, f"b{conv}").to(x.dtype)
            x = F.relu(F.conv2d(x, w, b, padding=1))
            if conv in tap_at:
                feats.append(x)
            if conv == stop:
                break
            conv += 1
        return feats

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self._run(x, "relu5_1")

    def layer(self, x: torch.Tensor, tap: str) -> torch.Tensor:
        if tap not in _TAP_CONV:
            raise KeyError(f"unknown tap {tap!r}; expected one of {TAPS}")
        return self._run(x, tap)[-1]

    def tensors(self) -> dict[str, torch.Tensor]:
        """Weights under torchvision naming, for writing a backbone asset."""
        out = {}
        for n, idx in enumerate(_TORCHVISION_CONV_INDEX):
            out[f"features.{idx}.weight"] = getattr(self, f"w{n}")
            out[f"features.{idx}.bias"] = getattr(self, f"b{n}")
        return out


def extract_pyramid(img: torch.Tensor, backbone: VGGEncoder) -> list[torch.Tensor]:
    return backbone(img)


def extract_layer(img: torch.Tensor, tap: str, backbone: VGGEncoder) -> torch.Tensor:
    return backbone.layer(img, tap)


def build_encoder(asset: Optional[str] = None, seed: int = 0) -> VGGEncoder:
    if asset:
        return VGGEncoder.from_archive(asset)
    return VGGEncoder.random(seed)
