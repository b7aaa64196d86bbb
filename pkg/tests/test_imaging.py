import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image as PILImage

from mrdetect.imaging import (
    ImageDecodeError,
    ImageFormatError,
    PerturbSpec,
    denormalize,
    gaussian_blur,
    gaussian_kernel,
    jpeg_compress,
    load_image,
    normalize,
    psnr,
    quantize,
    resize,
    save_png,
)
from mrdetect.datasets import render_face


def _write_rgb(path, pixels):
    PILImage.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path)
    return path


@pytest.mark.parametrize("value,expected", [(255, 1.0), (0, -1.0), (128, 0.003922)])
def test_load_image_value_map(tmp_path, value, expected):
    p = _write_rgb(tmp_path / "c.png", np.full((8, 8, 3), value))
    img = load_image(p, 8)
    assert img.dtype == np.float32
    assert img.shape == (8, 8, 3)
    assert np.allclose(img, expected, atol=5e-7)


def test_normalization_round_trip_all_values():
    v = np.arange(256, dtype=np.uint8)
    assert np.array_equal(denormalize(normalize(v)), v)


def test_load_image_center_crops_and_resizes(tmp_path):
    px = np.zeros((10, 16, 3), np.uint8)
    px[:, 3:13] = 255
    img = load_image(_write_rgb(tmp_path / "r.png", px))
    assert img.shape == (10, 10, 3)
    assert np.all(img == 1.0)
    assert load_image(tmp_path / "r.png", 32).shape == (32, 32, 3)


def test_load_image_errors(tmp_path):
    (tmp_path / "notes.png").write_text("plain text, not a raster")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "notes.png")
    good = _write_rgb(tmp_path / "g.png", np.zeros((32, 32, 3)))
    data = good.read_bytes()
    (tmp_path / "cut.png").write_bytes(data[: len(data) // 2])
    with pytest.raises(ImageDecodeError):
        load_image(tmp_path / "cut.png")
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "absent.png")


def test_png_round_trip_is_quantization(tmp_path):
    img = render_face(np.random.default_rng(3))
    save_png(img, tmp_path / "f.png")
    assert np.array_equal(load_image(tmp_path / "f.png"), quantize(img))


# --------------------------------------------------------------------------- blur


def test_blur_sigma_zero_is_identity():
    img = render_face(np.random.default_rng(0))
    out = gaussian_blur(img, 0)
    assert np.array_equal(out, img)
    assert out is not img


@pytest.mark.parametrize("sigma", [0.5, 1, 2, 3])
def test_blur_preserves_constants(sigma):
    img = np.full((16, 16, 3), 0.37, np.float32)
    assert np.allclose(gaussian_blur(img, sigma), 0.37, atol=1e-6)


def test_blur_impulse_center_matches_brute_force_kernel():
    # independent oracle: taps exp(-x^2 / 2) on |x| <= 3, normalized
    taps = [math.exp(-0.5 * x * x) for x in range(-3, 4)]
    center_1d = 1.0 / sum(taps)
    img = np.zeros((21, 21, 3), np.float64)
    img[10, 10] = 1.0
    out = gaussian_blur(img, 1)
    assert out[10, 10, 0] == pytest.approx(center_1d**2, abs=1e-12)
    assert gaussian_kernel(1)[3] == pytest.approx(center_1d, abs=1e-15)


def test_blur_negative_sigma_rejected():
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((8, 8, 3), np.float32), -1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), sigma=st.sampled_from([0.5, 1.0, 2.0, 3.0]),
       size=st.integers(20, 40))
def test_blur_preserves_mean(seed, sigma, size):
    img = np.random.default_rng(seed).uniform(-0.9, 0.9, (size, size, 3))
    assert abs(gaussian_blur(img, sigma).mean() - img.mean()) < 1e-6


def test_blur_is_pure():
    img = render_face(np.random.default_rng(5))
    assert np.array_equal(gaussian_blur(img, 2), gaussian_blur(img.copy(), 2))


# --------------------------------------------------------------------------- jpeg


@pytest.mark.parametrize("level", [1, 2, 3])
def test_jpeg_mid_gray_survives(level):
    img = np.full((32, 32, 3), normalize(np.uint8(128)), np.float32)
    assert np.max(np.abs(jpeg_compress(img, level) - img)) < 2 / 255 + 1e-6


def test_jpeg_quality_ordering_and_repeat_trend():
    img = quantize(render_face(np.random.default_rng(11)))
    outs = {q: jpeg_compress(img, q) for q in (1, 2, 3)}
    assert psnr(img, outs[1]) >= psnr(img, outs[2]) >= psnr(img, outs[3])
    for q in (1, 2, 3):
        first = np.abs(outs[q] - img).mean()
        second = np.abs(jpeg_compress(outs[q], q) - outs[q]).mean()
        assert second < first


@pytest.mark.parametrize("level", [0, 4, -1])
def test_jpeg_bad_level(level):
    with pytest.raises(ValueError):
        jpeg_compress(np.zeros((8, 8, 3), np.float32), level)


def test_jpeg_keeps_shape():
    img = render_face(np.random.default_rng(2))
    assert jpeg_compress(img, 3).shape == img.shape


# --------------------------------------------------------------------------- resize


def _bilinear_oracle(img, size):
    """Per-pixel loops: half-pixel centres, edge clamp."""
    n = img.shape[0]
    out = np.zeros((size, size, img.shape[2]))
    for i in range(size):
        for j in range(size):
            y = min(max((i + 0.5) * n / size - 0.5, 0), n - 1)
            x = min(max((j + 0.5) * n / size - 0.5, 0), n - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, n - 1), min(x0 + 1, n - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def test_resize_checkerboard_matches_brute_force():
    board = np.indices((8, 8)).sum(0) % 2 * 2.0 - 1.0
    img = np.repeat(board[..., None], 3, axis=2).astype(np.float32)
    out = resize(img, 16)
    assert out.shape == (16, 16, 3)
    assert np.allclose(out, _bilinear_oracle(img, 16), atol=1e-6)
    # interior output pixel 1 sits a quarter pixel from input pixel 0
    assert out[0, 1, 0] == pytest.approx(_bilinear_oracle(img, 16)[0, 1, 0], abs=1e-6)


def test_resize_downsample_matches_brute_force():
    img = np.random.default_rng(1).uniform(-1, 1, (20, 20, 3)).astype(np.float32)
    assert np.allclose(resize(img, 12), _bilinear_oracle(img, 12), atol=1e-5)


def test_resize_identity_and_constant():
    img = render_face(np.random.default_rng(4))
    assert np.array_equal(resize(img, 32), img)
    const = np.full((16, 16, 3), -0.25, np.float32)
    assert np.allclose(resize(const, 40), -0.25, atol=1e-7)


def test_resize_rejects_small_target():
    with pytest.raises(ValueError):
        resize(np.zeros((16, 16, 3), np.float32), 7)


# --------------------------------------------------------------------------- perturb spec


def test_perturb_spec_levels_and_tags():
    assert PerturbSpec("gaussian_blur", 2).tag == "blur_sigma2"
    assert PerturbSpec("jpeg", 1).tag == "jpeg_q1"
    img = render_face(np.random.default_rng(9))
    assert np.array_equal(PerturbSpec("gaussian_blur", 0).apply(img), img)
    for kind, level in [("gaussian_blur", 4), ("jpeg", 0), ("noise", 1)]:
        with pytest.raises(ValueError):
            PerturbSpec(kind, level)
