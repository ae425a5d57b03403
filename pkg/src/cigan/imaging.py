"""Image I/O, cropping and color helpers.

Images are float tensors shaped ``(B, C, H, W)`` with intensities in
``[0, 1]``. Random draws always go through an explicit
:class:`torch.Generator` so every caller controls its own stream.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

PathLike = Union[str, os.PathLike]

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


class ImageFormatError(ValueError):
    """Raised when an image file cannot be decoded into an 8-bit tensor."""


def make_rng(seed: int) -> torch.Generator:
    """Return a CPU generator seeded with ``seed`` (taken modulo 2**64)."""
    g = torch.Generator()
    g.manual_seed(int(seed) % (1 << 64))
    return g


def load_image(path: PathLike) -> torch.Tensor:
    """Read an 8-bit PNG/JPEG as a ``(1, C, H, W)`` float32 tensor, C in {1, 3}."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "P":
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            else:
                raise ImageFormatError(
                    f"{path}: unsupported mode {mode!r} (need 8-bit gray or RGB)"
                )
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a decodable image") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).unsqueeze(0)


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Round to the nearest 8-bit code, halves going up."""
    return torch.floor(img.clamp(0.0, 1.0) * 255.0 + 0.5) / 255.0


def save_image(img: torch.Tensor, path: PathLike) -> None:
    if img.dim() != 4 or img.shape[0] != 1:
        raise ValueError(f"save_image expects a single-image batch, got {tuple(img.shape)}")
    if img.shape[1] not in (1, 3):
        raise ValueError(f"save_image expects 1 or 3 channels, got {img.shape[1]}")
    x = img.detach().to(torch.float64).cpu()
    if not torch.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("save_image expects finite values in [0, 1]")
    codes = torch.floor(x[0] * 255.0 + 0.5).to(torch.uint8).numpy()
    codes = codes[0] if codes.shape[0] == 1 else codes.transpose(1, 2, 0)
    path = Path(path)
    try:
        Image.fromarray(codes).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc


def random_crop(img: torch.Tensor, size: int, rng: torch.Generator) -> torch.Tensor:
    """Crop a ``size x size`` window at a uniformly drawn offset.

    Offsets are drawn top first, then left. The crop is a pure slice.
    """
    h, w = img.shape[-2:]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than crop size {size}")
    top = int(torch.randint(0, h - size + 1, (1,), generator=rng))
    left = int(torch.randint(0, w - size + 1, (1,), generator=rng))
    return img[..., top : top + size, left : left + size]


def to_grayscale(img: torch.Tensor) -> torch.Tensor:
    """Unweighted mean over the R, G, B channels, keeping the channel dim."""
    if img.dim() != 4 or img.shape[1] != 3:
        raise ValueError(f"to_grayscale expects (B, 3, H, W), got {tuple(img.shape)}")
    return img.mean(dim=1, keepdim=True)


def list_images(directory: PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise NotADirectoryError(f"not a directory: {directory}")
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )
