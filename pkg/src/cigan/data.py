"""Unpaired normal/low-light image collections and batch sampling."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import torch

from .imaging import list_images, load_image, random_crop


class DatasetError(ValueError):
    pass


@dataclass
class UnpairedDataset:
    normal_paths: list[Path]
    low_paths: list[Path]
    crop_size: int
    hflip: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.normal_paths or not self.low_paths:
            raise DatasetError("both partitions must contain at least one image")
        normal = {os.path.realpath(p) for p in self.normal_paths}
        low = {os.path.realpath(p) for p in self.low_paths}
        shared = sorted(normal & low)
        if shared:
            raise DatasetError(f"file appears in both partitions: {shared[0]}")

    def image(self, path: Path) -> torch.Tensor:
        """Decoded image as (1, 3, H, W); kept as uint8 in memory after first use."""
        if path not in self._cache:
            img = load_image(path)
            if img.shape[1] == 1:
                img = img.expand(-1, 3, -1, -1)
            self._cache[path] = torch.floor(img * 255.0 + 0.5).to(torch.uint8)
        return self._cache[path].to(torch.float32) / 255.0


def _collect(source) -> list[Path]:
    source = Path(source)
    if source.is_dir():
        return list_images(source)
    if source.is_file():
        # manifest: one path per line, relative to the manifest's directory
        paths = []
        for line in source.read_text().splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                p = Path(line)
                paths.append(p if p.is_absolute() else source.parent / p)
        missing = [p for p in paths if not p.is_file()]
        if missing:
            raise DatasetError(f"{source}: listed file not found: {missing[0]}")
        return sorted(paths)
    raise DatasetError(f"no such directory or manifest: {source}")


def build_unpaired_dataset(normal_dir, low_dir, crop: int, hflip: bool = False) -> UnpairedDataset:
    normal, low = _collect(normal_dir), _collect(low_dir)
    if not normal:
        raise DatasetError(f"no images found in {normal_dir}")
    if not low:
        raise DatasetError(f"no images found in {low_dir}")
    return UnpairedDataset(normal, low, crop, hflip)


class UnpairedSampler:
    """Draws independent normal and low-light batches.

    An epoch is one shuffled pass over the larger partition (the normal one on
    ties); the other partition is sampled uniformly with replacement. All
    randomness comes from ``rng`` in a fixed order, so a seed fixes the stream.
    """

    def __init__(self, ds: UnpairedDataset, batch: int, rng: torch.Generator):
        if batch < 1:
            raise ValueError("batch must be >= 1")
        self.ds, self.batch, self.rng = ds, batch, rng
        self.normal_major = len(ds.normal_paths) >= len(ds.low_paths)
        self._perm: Optional[torch.Tensor] = None
        self._pos = 0

    @property
    def n_major(self) -> int:
        return len(self.ds.normal_paths if self.normal_major else self.ds.low_paths)

    @property
    def n_minor(self) -> int:
        return len(self.ds.low_paths if self.normal_major else self.ds.normal_paths)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n_major / self.batch)

    def next_indices(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self._perm is None or self._pos >= len(self._perm):
            self._perm = torch.randperm(self.n_major, generator=self.rng)
            self._pos = 0
        major = self._perm[self._pos : self._pos + self.batch]
        self._pos += len(major)
        minor = torch.randint(0, self.n_minor, (len(major),), generator=self.rng)
        return (major, minor) if self.normal_major else (minor, major)

    def _prepare(self, path: Path) -> torch.Tensor:
        img = self.ds.image(path)
        crop = self.ds.crop_size
        if min(img.shape[-2:]) < crop:
            raise DatasetError(f"{path}: image {tuple(img.shape[-2:])} smaller than crop {crop}")
        img = random_crop(img, crop, self.rng)
        if self.ds.hflip and bool(torch.rand(1, generator=self.rng) < 0.5):
            img = img.flip(-1)
        return img

    def next_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        ni, li = self.next_indices()
        normals = torch.cat([self._prepare(self.ds.normal_paths[i]) for i in ni.tolist()])
        lows = torch.cat([self._prepare(self.ds.low_paths[i]) for i in li.tolist()])
        return normals, lows

    def epoch(self) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """Yield one full epoch, starting a fresh shuffle."""
        self._perm = None
        for _ in range(self.steps_per_epoch):
            yield self.next_batch()

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.get_state(),
            "perm": self._perm.clone() if self._perm is not None else torch.empty(0, dtype=torch.int64),
            "pos": self._pos,
        }

    def load_state_dict(self, state: dict) -> None:
        self.rng.set_state(state["rng"])
        perm = state["perm"]
        self._perm = perm.clone() if perm.numel() else None
        self._pos = int(state["pos"])


def sample_batch(ds: UnpairedDataset, batch: int, rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """One batch from a fresh sampler driven by ``rng``."""
    return UnpairedSampler(ds, batch, rng).next_batch()
