import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from cigan.spectral import (
    SpectralNorm,
    add_spectral_norm,
    apply_spectral_norm,
    constrained_layers,
    raw_weight,
    spectral_norm,
)
from oracles import top_singular_value


def _with_singular_values(svals, shape, seed=0):
    rng = np.random.default_rng(seed)
    rows, cols = shape[0], int(np.prod(shape[1:]))
    u, _ = np.linalg.qr(rng.normal(size=(rows, rows)))
    v, _ = np.linalg.qr(rng.normal(size=(cols, cols)))
    s = np.zeros((rows, cols))
    s[np.arange(len(svals)), np.arange(len(svals))] = svals
    return torch.tensor(u @ s @ v.T, dtype=torch.float32).reshape(shape)


def test_known_sigma_two_converges_within_twenty_iterations():
    w = _with_singular_values([2.0, 1.5, 0.5, 0.1], (4, 3, 3, 3))
    sn = SpectralNorm(w, init_iters=0)
    sn.power_iteration(w, 20)
    s1 = np.linalg.svd(sn(w).double().reshape(4, -1).numpy(), compute_uv=False)[0]
    assert 0.95 <= s1 <= 1.05


def test_orthonormal_weight_unchanged():
    q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(6, 6)))
    w = torch.tensor(q, dtype=torch.float32)
    sn = SpectralNorm(w)
    assert torch.allclose(sn(w), w, atol=1e-3)


def test_zero_weight_maps_to_zero():
    w = torch.zeros(3, 2, 3, 3)
    sn = SpectralNorm(w)
    out = sn(w)
    assert torch.all(torch.isfinite(out)) and torch.all(out == 0)
    conv = spectral_norm(nn.Conv2d(2, 3, 3))
    with torch.no_grad():
        raw_weight(conv).zero_()
    apply_spectral_norm(conv)
    assert torch.all(conv.weight == 0)
    assert torch.all(torch.isfinite(conv(torch.randn(1, 2, 5, 5))))


def test_forward_does_not_iterate_but_apply_does():
    conv = spectral_norm(nn.Conv2d(3, 4, 3))
    sn = conv.parametrizations["weight"][0]
    u0 = sn.u.clone()
    with torch.no_grad():
        raw_weight(conv).add_(torch.randn_like(raw_weight(conv)))
    for _ in range(3):
        conv(torch.randn(1, 3, 6, 6))
    assert torch.equal(sn.u, u0)
    apply_spectral_norm(conv, n_iters=1)
    assert not torch.equal(sn.u, u0)


def test_add_spectral_norm_covers_every_conv_and_linear():
    model = nn.Sequential(nn.Conv2d(3, 4, 3), nn.ReLU(), nn.Conv2d(4, 4, 1), nn.Flatten(), nn.Linear(4, 2))
    add_spectral_norm(model)
    names = [n for n, _, _ in constrained_layers(model)]
    assert names == ["0", "2", "4"]
    # idempotent
    add_spectral_norm(model)
    assert len(list(constrained_layers(model))) == 3


def test_gradient_flows_to_raw_weight():
    conv = spectral_norm(nn.Conv2d(2, 2, 3))
    conv(torch.randn(1, 2, 5, 5)).sum().backward()
    assert raw_weight(conv).grad is not None


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 16), st.integers(1, 40), st.floats(0.01, 50))
def test_normalised_top_singular_value_bounded(seed, rows, cols, scale):
    w = torch.randn(rows, cols, generator=torch.Generator().manual_seed(seed)) * scale
    sn = SpectralNorm(w, seed=seed)
    assert top_singular_value(sn(w).double().numpy()) <= 1.05
