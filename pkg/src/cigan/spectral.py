"""Spectral normalisation with explicit, once-per-step power iteration.

Unlike ``torch.nn.utils.spectral_norm`` the forward pass never advances the
power iteration; :func:`apply_spectral_norm` does, so the number of updates
per training step does not depend on how many times a layer is evaluated.

A single warm-started iteration per step can trail the true singular value
badly right after a large optimizer update (Adam with ``beta1 = 0`` takes
near sign-valued steps). ``tol`` keeps iterating until ``u`` settles.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

EPS = 1e-12


class SpectralNorm(nn.Module):
    """Parametrization ``W -> W / max(u^T W v, eps)`` over the unrolled ``(out, -1)`` matrix."""

    def __init__(self, weight: torch.Tensor, init_iters: int = 50, seed: int = 0):
        super().__init__()
        mat = weight.detach().reshape(weight.shape[0], -1)
        g = torch.Generator().manual_seed(seed)
        u = F.normalize(torch.randn(mat.shape[0], generator=g, dtype=mat.dtype), dim=0, eps=EPS)
        v = F.normalize(torch.randn(mat.shape[1], generator=g, dtype=mat.dtype), dim=0, eps=EPS)
        self.register_buffer("u", u)
        self.register_buffer("v", v)
        self.power_iteration(weight, init_iters)

    @torch.no_grad()
    def power_iteration(
        self,
        weight: torch.Tensor,
        n_iters: int = 1,
        tol: Optional[float] = None,
        max_iters: int = 200,
    ) -> int:
        """Advance ``u, v``; with ``tol``, continue until ``u`` moves by less
        than ``tol`` (Euclidean) in one iteration. Returns the iteration count."""
        mat = weight.detach().reshape(weight.shape[0], -1).to(self.u.dtype)
        limit = max(n_iters, max_iters) if tol is not None else n_iters
        done = 0
        while done < limit:
            v = F.normalize(mat.t() @ self.u, dim=0, eps=EPS)
            u = F.normalize(mat @ v, dim=0, eps=EPS)
            # keep the previous vectors when the weight is zero
            if v.abs().sum() == 0 or u.abs().sum() == 0:
                return done + 1
            moved = float(torch.linalg.vector_norm(u - self.u))
            self.v.copy_(v)
            self.u.copy_(u)
            done += 1
            if tol is not None and done >= n_iters and moved <= tol:
                break
        return done

    def sigma(self, weight: torch.Tensor) -> torch.Tensor:
        mat = weight.reshape(weight.shape[0], -1)
        return torch.dot(self.u.to(weight.dtype), mat @ self.v.to(weight.dtype))

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        return weight / self.sigma(weight).clamp_min(EPS)


def spectral_norm(module: nn.Module, name: str = "weight") -> nn.Module:
    weight = getattr(module, name)
    parametrize.register_parametrization(module, name, SpectralNorm(weight), unsafe=True)
    return module


def add_spectral_norm(model: nn.Module) -> nn.Module:
    """Register :class:`SpectralNorm` on every conv and linear layer in ``model``."""
    for m in list(model.modules()):
        if isinstance(m, (nn.Conv2d, nn.Linear)) and not parametrize.is_parametrized(m, "weight"):
            spectral_norm(m)
    return model


def constrained_layers(model: nn.Module):
    """Yield ``(qualified_name, module, SpectralNorm)`` for each normalised weight."""
    for qual, m in model.named_modules():
        if parametrize.is_parametrized(m, "weight"):
            for p in m.parametrizations["weight"]:
                if isinstance(p, SpectralNorm):
                    yield qual, m, p


@torch.no_grad()
def apply_spectral_norm(model: nn.Module, n_iters: int = 1, tol: Optional[float] = None) -> nn.Module:
    """Advance every persistent power-iteration estimate by ``n_iters`` steps,
    or further until converged to ``tol`` when given."""
    for _, m, sn in constrained_layers(model):
        sn.power_iteration(m.parametrizations["weight"].original, n_iters, tol=tol)
    return model


def raw_weight(module: nn.Module) -> torch.Tensor:
    return module.parametrizations["weight"].original
