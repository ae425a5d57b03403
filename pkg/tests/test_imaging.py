import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import stats

from cigan.imaging import (
    ImageFormatError,
    load_image,
    make_rng,
    quantize,
    random_crop,
    save_image,
    to_grayscale,
)


def _write(path, arr, mode=None):
    Image.fromarray(arr, mode=mode).save(path)
    return path


def test_load_black_and_white(tmp_path):
    black = load_image(_write(tmp_path / "b.png", np.zeros((8, 9, 3), np.uint8)))
    white = load_image(_write(tmp_path / "w.png", np.full((8, 9, 3), 255, np.uint8)))
    assert black.shape == (1, 3, 8, 9)
    assert torch.all(black == 0)
    assert torch.all(white == 1)


def test_load_exact_code_division(tmp_path):
    img = load_image(_write(tmp_path / "g.png", np.full((4, 4), 128, np.uint8)))
    assert img.shape == (1, 1, 4, 4)
    assert torch.all(img == torch.tensor(128 / 255.0, dtype=torch.float32))
    assert abs(img[0, 0, 0, 0].item() - 0.50196) < 1e-5


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.png"):
        load_image(tmp_path / "missing.png")
    rgba = _write(tmp_path / "rgba.png", np.zeros((4, 4, 4), np.uint8))
    with pytest.raises(ImageFormatError, match="rgba.png"):
        load_image(rgba)
    deep = tmp_path / "deep.png"
    Image.fromarray(np.zeros((4, 4), np.uint16)).save(deep)
    with pytest.raises(ImageFormatError, match="deep.png"):
        load_image(deep)
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not an image")
    with pytest.raises(ImageFormatError, match="junk.png"):
        load_image(junk)


def test_save_quantizer_rounds_half_up(tmp_path):
    path = tmp_path / "half.png"
    save_image(torch.full((1, 3, 2, 2), 0.5), path)
    assert np.all(np.asarray(Image.open(path)) == 128)
    save_image(torch.zeros(1, 3, 2, 2), path)
    assert np.all(np.asarray(Image.open(path)) == 0)


def test_save_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        save_image(torch.zeros(2, 3, 4, 4), tmp_path / "x.png")
    with pytest.raises(ValueError):
        save_image(torch.full((1, 3, 4, 4), 1.5), tmp_path / "x.png")
    with pytest.raises(OSError):
        save_image(torch.zeros(1, 3, 4, 4), tmp_path / "no_dir" / "x.png")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3]))
def test_save_load_roundtrip_on_quantized(tmp_path_factory, seed, channels):
    g = torch.Generator().manual_seed(seed)
    x = quantize(torch.rand(1, channels, 7, 5, generator=g))
    path = tmp_path_factory.mktemp("rt") / "x.png"
    save_image(x, path)
    assert torch.equal(load_image(path), x)


def test_crop_identity_when_sizes_match():
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(random_crop(x, 16, make_rng(0)), x)


def test_crop_deterministic_and_pure_gather():
    x = torch.rand(1, 3, 40, 50)
    a = random_crop(x, 16, make_rng(5))
    b = random_crop(x, 16, make_rng(5))
    assert torch.equal(a, b)
    # every crop is a contiguous window of the source
    found = any(
        torch.equal(x[..., i : i + 16, j : j + 16], a) for i in range(25) for j in range(35)
    )
    assert found


def test_crop_too_large():
    with pytest.raises(ValueError, match="smaller than crop"):
        random_crop(torch.rand(1, 3, 10, 20), 16, make_rng(0))


def test_crop_offsets_uniform_chi_square():
    size = 8
    # encode position in the pixel values so each crop reveals its offset
    h = w = 2 * size
    ys, xs = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    img = torch.stack([ys, xs, ys]).float().unsqueeze(0)
    rng = make_rng(2024)
    n_off = h - size + 1
    counts_top = np.zeros(n_off)
    counts_left = np.zeros(n_off)
    for _ in range(10_000):
        c = random_crop(img, size, rng)
        counts_top[int(c[0, 0, 0, 0])] += 1
        counts_left[int(c[0, 1, 0, 0])] += 1
    for counts in (counts_top, counts_left):
        _, p = stats.chisquare(counts)
        assert p > 0.01


def test_grayscale_values():
    assert to_grayscale(torch.ones(1, 3, 2, 2)).flatten().tolist() == [1.0] * 4
    red = torch.zeros(1, 3, 1, 1)
    red[0, 0] = 1
    assert to_grayscale(red).item() == pytest.approx(1 / 3, abs=1e-7)
    with pytest.raises(ValueError):
        to_grayscale(torch.ones(1, 1, 2, 2))


def test_grayscale_matches_pixel_mean_oracle():
    x = torch.rand(2, 3, 9, 7, generator=torch.Generator().manual_seed(1))
    arr = x.numpy().astype(np.float64)
    oracle = np.empty((2, 1, 9, 7))
    for b in range(2):
        for i in range(9):
            for j in range(7):
                oracle[b, 0, i, j] = (arr[b, 0, i, j] + arr[b, 1, i, j] + arr[b, 2, i, j]) / 3
    np.testing.assert_allclose(to_grayscale(x).numpy(), oracle, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_grayscale_stays_in_unit_range(seed):
    x = torch.rand(1, 3, 4, 4, generator=torch.Generator().manual_seed(seed))
    y = to_grayscale(x)
    assert y.min() >= 0 and y.max() <= 1
