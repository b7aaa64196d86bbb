import numpy as np
import pytest
import torch

from mrdetect.datasets import render_face
from mrdetect.errors import DataError, OptimizationError
from mrdetect.gan import (
    Discriminator,
    Encoder,
    EncoderTrainConfig,
    GanArch,
    GanLatent,
    GanTrainConfig,
    Generator,
    LossSpec,
    PerceptualNet,
    discriminator_accuracy,
    encode,
    generate,
    invert_optimize,
    load_encoder,
    load_gan,
    reconstruct_gan,
    sample_images,
    save_encoder,
    save_gan,
    train_encoder,
    train_gan,
)
from mrdetect.imaging import to_chw
from mrdetect.nnutil import params_equal, seeded

ARCH = GanArch(L=3, d=16, k=8, image_size=16, widths=(32, 16, 16), detail_layer=1)


@pytest.fixture(scope="module")
def faces():
    return np.stack([render_face(np.random.default_rng([2, i]), 16) for i in range(96)])


@pytest.fixture(scope="module")
def trained(faces):
    gen, disc, hist = train_gan(faces, GanTrainConfig(steps=30, batch_size=8, seed=1, arch=ARCH))
    return gen, disc, hist


@pytest.fixture(scope="module")
def encoder(trained, faces):
    gen = trained[0]
    enc, hist = train_encoder(gen, faces, EncoderTrainConfig(steps=60, batch_size=8, lr=2e-3, seed=2))
    return enc, hist


def test_latent_concat_round_trip():
    rng = np.random.default_rng(0)
    z = GanLatent(rng.normal(size=(5, 3, 16)), rng.normal(size=(5, 8)))
    flat = z.concat()
    assert flat.shape == (5, 3 * 16 + 8)
    assert np.array_equal(flat[:, :16], z.w[:, 0])
    back = GanLatent.from_concat(flat, 3, 16)
    assert np.array_equal(back.w, z.w) and np.array_equal(back.w_star, z.w_star)
    assert len(z[1:3]) == 2


def test_generate_deterministic_in_range(trained):
    gen = trained[0]
    imgs, z = sample_images(gen, 5, seed=3)
    assert imgs.shape == (5, 16, 16, 3)
    assert imgs.min() >= -1 and imgs.max() <= 1
    assert np.array_equal(generate(z, gen), imgs)
    # one latent alone gives the same bits as inside a batch
    assert np.array_equal(generate(z[2:3], gen)[0], imgs[2])


def test_generator_sensitive_to_each_style_layer(trained):
    gen = trained[0]
    _, z = sample_images(gen, 1, seed=4)
    base = generate(z, gen)
    for layer in range(ARCH.L):
        w = z.w.copy()
        w[0, layer] += 1.0
        assert np.max(np.abs(generate(GanLatent(w, z.w_star), gen) - base)) > 0
    s = z.w_star.copy() + 1.0
    assert np.max(np.abs(generate(GanLatent(z.w, s), gen) - base)) > 0


def test_generate_dimension_mismatch(trained):
    with pytest.raises(ValueError):
        generate(GanLatent(np.zeros((1, 2, 16)), np.zeros((1, 8))), trained[0])


def test_encode_shapes_and_errors(encoder, faces):
    enc, _ = encoder
    z = encode(faces[:4], enc)
    assert z.w.shape == (4, ARCH.L, ARCH.d) and z.w_star.shape == (4, ARCH.k)
    again = encode(faces[:4], enc)
    assert np.array_equal(z.w, again.w) and np.array_equal(z.w_star, again.w_star)
    with pytest.raises(ValueError):
        encode(np.zeros((1, 32, 32, 3), np.float32), enc)


def test_train_gan_zero_steps_is_seeded_init(faces):
    gen, disc, hist = train_gan(faces, GanTrainConfig(steps=0, seed=9, arch=ARCH))
    with seeded(9):
        g2, d2 = Generator(ARCH), Discriminator(ARCH.image_size)
    assert params_equal(gen, g2) and params_equal(disc, d2)
    assert hist == {"d_loss": [], "g_loss": []}


def test_untrained_critic_is_at_chance(faces):
    gen, disc, _ = train_gan(faces, GanTrainConfig(steps=0, seed=0, arch=ARCH))
    real = np.stack([render_face(np.random.default_rng([77, i]), 16) for i in range(1000)])
    fake, _ = sample_images(gen, 1000, seed=5)
    assert abs(discriminator_accuracy(disc, real, fake) - 0.5) <= 0.05


def test_train_gan_records_curves_and_is_deterministic(faces, trained):
    gen, _, hist = trained
    assert len(hist["d_loss"]) == len(hist["g_loss"]) == 30
    assert all(np.isfinite(hist["d_loss"]))
    gen2, _, _ = train_gan(faces, GanTrainConfig(steps=30, batch_size=8, seed=1, arch=ARCH))
    assert params_equal(gen, gen2)


def test_train_gan_empty_data():
    with pytest.raises(DataError):
        train_gan(np.zeros((0, 16, 16, 3)), GanTrainConfig(steps=1, arch=ARCH))


def test_encoder_loss_decreases_and_is_deterministic(trained, encoder, faces):
    enc, hist = encoder
    assert np.mean(hist[-10:]) < np.mean(hist[:10])
    enc2, _ = train_encoder(trained[0], faces, EncoderTrainConfig(steps=60, batch_size=8, lr=2e-3, seed=2))
    assert params_equal(enc, enc2)


def test_zero_perceptual_weight_is_pixel_mse():
    a = torch.rand(3, 3, 16, 16) * 2 - 1
    b = torch.rand(3, 3, 16, 16) * 2 - 1
    got = LossSpec(1.0, 0.0).per_sample(a, b, None)
    assert torch.allclose(got, ((a - b) ** 2).mean(dim=(1, 2, 3)))
    with_p = LossSpec(1.0, 0.1).per_sample(a, b, PerceptualNet())
    assert torch.all(with_p > got)


def test_perceptual_net_is_frozen_and_seeded():
    p1, p2 = PerceptualNet(7), PerceptualNet(7)
    assert params_equal(p1, p2)
    assert not any(p.requires_grad for p in p1.parameters())
    x = torch.rand(2, 3, 16, 16)
    assert torch.all(p1.distance(x, x) == 0)


def test_invert_at_true_latent_is_fixed_point(trained):
    gen = trained[0]
    imgs, z0 = sample_images(gen, 3, seed=6)
    spec = LossSpec(1.0, 0.0)
    z, loss = invert_optimize(imgs, gen, z0, steps=20, loss_spec=spec)
    assert np.all(loss == 0)
    assert np.array_equal(z.w, z0.w) and np.array_equal(z.w_star, z0.w_star)


def test_invert_zero_steps_returns_init(trained, faces):
    gen = trained[0]
    _, z0 = sample_images(gen, 2, seed=8)
    z, _ = invert_optimize(faces[:2], gen, z0, steps=0)
    assert np.array_equal(z.w, z0.w) and np.array_equal(z.w_star, z0.w_star)
    with pytest.raises(ValueError):
        invert_optimize(faces[:2], gen, z0, steps=-1)


def test_refinement_beats_encoder_only(trained, encoder):
    gen, enc = trained[0], encoder[0]
    imgs, _ = sample_images(gen, 4, seed=10)
    spec = LossSpec(1.0, 0.0)
    init = encode(imgs, enc)
    _, init_loss = invert_optimize(imgs, gen, init, steps=0, loss_spec=spec)
    _, loss = invert_optimize(imgs, gen, init, steps=40, loss_spec=spec, lr=0.02)
    assert np.all(loss <= init_loss)
    assert loss.mean() < init_loss.mean()


def test_invert_non_finite_loss(trained):
    gen = trained[0]
    imgs, z0 = sample_images(gen, 1, seed=1)
    imgs[0, 0, 0, 0] = np.nan
    with pytest.raises(OptimizationError):
        invert_optimize(imgs, gen, z0, steps=3)


def test_reconstruct_gan_composition(trained, encoder, faces):
    gen, enc = trained[0], encoder[0]
    x = faces[:5]
    out = reconstruct_gan(x, enc, gen)
    assert out.shape == x.shape
    assert np.array_equal(out, generate(encode(x, enc), gen))
    assert np.array_equal(reconstruct_gan(x[0], enc, gen), out[0])
    refined = reconstruct_gan(x[:2], enc, gen, refine_steps=5, loss_spec=LossSpec(1.0, 0.0))
    base_err = ((out[:2] - x[:2]) ** 2).mean(axis=(1, 2, 3))
    ref_err = ((refined - x[:2]) ** 2).mean(axis=(1, 2, 3))
    assert np.all(ref_err <= base_err + 1e-7)


def test_truncation_shrinks_towards_average(trained):
    gen = trained[0]
    _, z1 = sample_images(gen, 64, seed=3)
    _, z7 = sample_images(gen, 64, seed=3, truncation=0.7)
    avg = gen.w_avg.numpy()
    assert np.allclose(z7.w - avg, 0.7 * (z1.w - avg), atol=1e-5)


def test_checkpoints_round_trip(tmp_path, trained, encoder):
    gen, disc, _ = trained
    enc, _ = encoder
    d1 = save_gan(tmp_path / "g.safetensors", gen, disc, seed=1)
    assert d1 == save_gan(tmp_path / "g2.safetensors", gen, disc, seed=1)
    g2, dd2, header = load_gan(tmp_path / "g.safetensors")
    assert header["arch"]["L"] == ARCH.L
    assert params_equal(gen, g2) and params_equal(disc, dd2)
    save_encoder(tmp_path / "e.safetensors", enc, 2, LossSpec())
    e2, eh = load_encoder(tmp_path / "e.safetensors")
    assert params_equal(enc, e2) and eh["loss"]["perceptual_weight"] == 0.1
    x = np.stack([render_face(np.random.default_rng(i), 16) for i in range(3)])
    assert np.array_equal(reconstruct_gan(x, enc, gen), reconstruct_gan(x, e2, g2))


def test_encoder_matches_generator_layout():
    enc = Encoder(ARCH)
    w, s = enc(torch.from_numpy(to_chw(np.zeros((2, 16, 16, 3), np.float32))))
    assert w.shape == (2, ARCH.L, ARCH.d) and s.shape == (2, ARCH.k)
