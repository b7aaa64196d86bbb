"""Toy style-based GAN, encoder inversion and optimization-based inversion.

The generator consumes a :class:`GanLatent`: ``w`` holds one style code per
synthesis layer (``L x d``) and ``w_star`` is a ``k``-dim feature code added
as a spatial detail map ahead of the 16x16 layer. The concatenation
``Z_R = [w.flatten(), w_star]`` is the inversion target.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .errors import DataError, OptimizationError, TrainingError
from .imaging import to_chw, to_hwc
from .nnutil import INFER_CHUNK, generator, seeded


@dataclass
class GanLatent:
    """Batch of latents: ``w`` is ``(N, L, d)``, ``w_star`` is ``(N, k)``."""

    w: np.ndarray
    w_star: np.ndarray

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float32)
        self.w_star = np.asarray(self.w_star, dtype=np.float32)
        if self.w.ndim == 2:
            self.w = self.w[None]
        if self.w_star.ndim == 1:
            self.w_star = self.w_star[None]
        if self.w.shape[0] != self.w_star.shape[0]:
            raise ValueError("w and w_star batch sizes differ")

    def __len__(self) -> int:
        return self.w.shape[0]

    def concat(self) -> np.ndarray:
        """``Z_R`` as ``(N, L*d + k)`` in fixed order (w, then w_star)."""
        return np.concatenate([self.w.reshape(len(self), -1), self.w_star], axis=1)

    @classmethod
    def from_concat(cls, z: np.ndarray, L: int, d: int) -> "GanLatent":
        z = np.atleast_2d(z)
        return cls(z[:, : L * d].reshape(-1, L, d), z[:, L * d :])

    def __getitem__(self, idx) -> "GanLatent":
        return GanLatent(self.w[idx], self.w_star[idx])


@dataclass
class GanArch:
    L: int = 4
    d: int = 64
    k: int = 64
    image_size: int = 32
    widths: tuple[int, ...] = (128, 128, 64, 32)
    mapping_layers: int = 2
    detail_layer: int = 2


# --------------------------------------------------------------------------- #
# Networks


class StyleConv(nn.Module):
    """3x3 conv followed by instance norm re-styled from a per-layer code."""

    def __init__(self, c_in: int, c_out: int, d: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.style = nn.Linear(d, 2 * c_out)
        nn.init.zeros_(self.style.weight)
        with torch.no_grad():
            self.style.bias.copy_(torch.cat([torch.ones(c_out), torch.zeros(c_out)]))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        h = F.instance_norm(self.conv(x))
        scale, bias = self.style(w).chunk(2, dim=1)
        return F.leaky_relu(h * scale[:, :, None, None] + bias[:, :, None, None], 0.2)


class Generator(nn.Module):
    def __init__(self, arch: GanArch | None = None):
        super().__init__()
        self.arch = arch = arch or GanArch()
        if len(arch.widths) != arch.L or 4 * 2 ** (arch.L - 1) != arch.image_size:
            raise ValueError("widths must have L entries and 4 * 2**(L-1) must equal image_size")
        layers = [nn.Linear(arch.d, arch.d)]
        for _ in range(arch.mapping_layers - 1):
            layers += [nn.LeakyReLU(0.2), nn.Linear(arch.d, arch.d)]
        self.mapping = nn.Sequential(*layers)
        self.const = nn.Parameter(torch.randn(1, arch.widths[0], 4, 4))
        self.blocks = nn.ModuleList()
        prev = arch.widths[0]
        for w in arch.widths:
            self.blocks.append(nn.ModuleList([StyleConv(prev, w, arch.d), StyleConv(w, w, arch.d)]))
            prev = w
        detail_res = 4 * 2**arch.detail_layer
        self.detail_shape = (8, detail_res, detail_res)
        self.detail = nn.Linear(arch.k, int(np.prod(self.detail_shape)))
        self.detail_proj = nn.Conv2d(8, arch.widths[arch.detail_layer - 1], 1)
        self.to_rgb = nn.Conv2d(prev, 3, 1)
        self.register_buffer("w_avg", torch.zeros(arch.d))

    def map(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def synthesize(self, w: torch.Tensor, w_star: torch.Tensor) -> torch.Tensor:
        """``w``: ``(N, L, d)``; ``w_star``: ``(N, k)`` -> images ``(N, 3, H, W)`` in [-1, 1]."""
        n = w.shape[0]
        x = self.const.expand(n, -1, -1, -1)
        for i, (c1, c2) in enumerate(self.blocks):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            if i == self.arch.detail_layer:
                x = x + self.detail_proj(self.detail(w_star).view(n, *self.detail_shape))
            x = c2(c1(x, w[:, i]), w[:, i])
        return torch.tanh(self.to_rgb(x))

    def sample_latent(self, n: int, gen: torch.Generator, truncation: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
        z = torch.randn(n, self.arch.d, generator=gen)
        w_star = torch.randn(n, self.arch.k, generator=gen)
        w = self.map(z)
        if truncation != 1.0:
            w = self.w_avg + truncation * (w - self.w_avg)
            w_star = truncation * w_star
        return w[:, None].expand(-1, self.arch.L, -1), w_star


class Discriminator(nn.Module):
    def __init__(self, image_size: int = 32, width: int = 32):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.2)]
        c, res = width, image_size
        while res > 4:
            nxt = min(c * 2, 128)
            layers += [nn.Conv2d(c, nxt, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c, res = nxt, res // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c * 16, 1)
        # an untrained critic is uninformative: logit 0 for every input
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).flatten(1)).squeeze(1)


class Encoder(nn.Module):
    """Image -> (w, w_star); ``w`` is predicted as an offset from ``w_avg``."""

    def __init__(self, arch: GanArch | None = None, width: int = 32):
        super().__init__()
        self.arch = arch = arch or GanArch()
        layers: list[nn.Module] = [nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.2)]
        c, res = width, arch.image_size
        while res > 4:
            nxt = min(c * 2, 256)
            layers += [nn.Conv2d(c, nxt, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
                       nn.Conv2d(nxt, nxt, 3, padding=1), nn.LeakyReLU(0.2)]
            c, res = nxt, res // 2
        self.features = nn.Sequential(*layers)
        self.w_head = nn.Linear(c * 16, arch.L * arch.d)
        self.star_head = nn.Linear(c * 16, arch.k)
        self.register_buffer("w_avg", torch.zeros(arch.d))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.features(x).flatten(1)
        w = self.w_head(h).view(-1, self.arch.L, self.arch.d) + self.w_avg
        return w, self.star_head(h)


class PerceptualNet(nn.Module):
    """Frozen, seeded random conv features used as the perceptual distance."""

    def __init__(self, seed: int = 1234):
        super().__init__()
        with seeded(seed):
            self.stages = nn.ModuleList([
                nn.Sequential(nn.Conv2d(3, 16, 3, padding=1), nn.ReLU()),
                nn.Sequential(nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU()),
                nn.Sequential(nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.ReLU()),
            ])
        self.seed = seed
        self.requires_grad_(False)
        self.eval()

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-sample mean squared feature distance summed over stages."""
        total = torch.zeros(a.shape[0])
        for stage in self.stages:
            a, b = stage(a), stage(b)
            total = total + (a - b).pow(2).flatten(1).mean(1)
        return total


@dataclass
class LossSpec:
    """Reconstruction objective ``pixel_weight * MSE + perceptual_weight * perceptual``."""

    pixel_weight: float = 1.0
    perceptual_weight: float = 0.1
    perceptual_seed: int = 1234

    def per_sample(self, x: torch.Tensor, target: torch.Tensor, percep: PerceptualNet | None) -> torch.Tensor:
        loss = self.pixel_weight * (x - target).pow(2).flatten(1).mean(1)
        if self.perceptual_weight:
            if percep is None:
                raise ValueError("perceptual weight set but no perceptual net supplied")
            loss = loss + self.perceptual_weight * percep.distance(x, target)
        return loss


# --------------------------------------------------------------------------- #
# Inference helpers


def _latent_tensors(z: GanLatent, gen: Generator) -> tuple[torch.Tensor, torch.Tensor]:
    a = gen.arch
    if z.w.shape[1:] != (a.L, a.d) or z.w_star.shape[1:] != (a.k,):
        raise ValueError(f"latent shapes {z.w.shape[1:]}/{z.w_star.shape[1:]} do not match "
                         f"generator ({a.L}, {a.d})/({a.k},)")
    return torch.from_numpy(z.w), torch.from_numpy(z.w_star)


def _chunks(n: int, chunk: int = INFER_CHUNK):
    for start in range(0, n, chunk):
        yield start, min(start + chunk, n)


def _pad(t: torch.Tensor, chunk: int = INFER_CHUNK) -> torch.Tensor:
    k = t.shape[0]
    if k == chunk:
        return t
    return torch.cat([t, t.new_zeros((chunk - k,) + tuple(t.shape[1:]))])


def generate(z: GanLatent, gen: Generator) -> np.ndarray:
    """Deterministic G(z); returns ``(N, H, W, 3)`` float32 images."""
    w, w_star = _latent_tensors(z, gen)
    gen.eval()
    outs = []
    with torch.no_grad():
        for s, e in _chunks(len(z)):
            out = gen.synthesize(_pad(w[s:e]), _pad(w_star[s:e]))
            outs.append(out[: e - s])
    return to_hwc(torch.cat(outs).numpy())


def encode(images: np.ndarray, enc: Encoder) -> GanLatent:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    size = enc.arch.image_size
    if images.shape[1:3] != (size, size):
        raise ValueError(f"encoder expects {size}x{size} images, got {images.shape[1]}x{images.shape[2]}")
    x = torch.from_numpy(to_chw(images))
    enc.eval()
    ws, stars = [], []
    with torch.no_grad():
        for s, e in _chunks(x.shape[0]):
            w, st = enc(_pad(x[s:e]))
            ws.append(w[: e - s])
            stars.append(st[: e - s])
    return GanLatent(torch.cat(ws).numpy(), torch.cat(stars).numpy())


def sample_images(gen: Generator, n: int, seed: int, truncation: float = 1.0) -> tuple[np.ndarray, GanLatent]:
    g = generator(seed)
    with torch.no_grad():
        w, w_star = gen.sample_latent(n, g, truncation)
    z = GanLatent(w.numpy().copy(), w_star.numpy().copy())
    return generate(z, gen), z


def invert_optimize(images: np.ndarray, gen: Generator, init: GanLatent, steps: int = 200,
                    loss_spec: LossSpec | None = None, lr: float = 0.01) -> tuple[GanLatent, np.ndarray]:
    """Minimise ``loss_spec`` between G(z) and each image, starting from ``init``.

    Adam acts elementwise, so samples in a batch are optimised independently.
    Returns the best latent seen per sample and its loss; the initial latent
    counts as an iterate, so the returned loss never exceeds the initial one.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    loss_spec = loss_spec or LossSpec()
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if len(init) != images.shape[0]:
        raise ValueError("init latent batch does not match image batch")
    w0, s0 = _latent_tensors(init, gen)
    target = torch.from_numpy(to_chw(images))
    # pad to whole inference chunks so G(z) here has the same bits as generate()
    n = len(init)
    padded = -(-n // INFER_CHUNK) * INFER_CHUNK
    w0, s0, target = (_pad(t, padded) for t in (w0, s0, target))
    percep = PerceptualNet(loss_spec.perceptual_seed) if loss_spec.perceptual_weight else None
    gen.eval()
    gen.requires_grad_(False)

    best_w, best_s = w0.clone(), s0.clone()
    with torch.no_grad():
        best_loss = loss_spec.per_sample(gen.synthesize(w0, s0), target, percep)
    if not torch.isfinite(best_loss).all():
        raise OptimizationError("initial inversion loss is non-finite")
    if steps == 0:
        return GanLatent(best_w[:n].numpy(), best_s[:n].numpy()), best_loss[:n].numpy()

    w = w0.clone().requires_grad_(True)
    s = s0.clone().requires_grad_(True)
    opt = torch.optim.Adam([w, s], lr=lr)

    def keep_best(cur: torch.Tensor) -> None:
        nonlocal best_loss
        if not torch.isfinite(cur).all():
            raise OptimizationError("inversion loss became non-finite")
        better = cur < best_loss
        best_loss = torch.where(better, cur, best_loss)
        best_w[better] = w.detach()[better]
        best_s[better] = s.detach()[better]

    for _ in range(steps):
        opt.zero_grad(set_to_none=True)
        loss = loss_spec.per_sample(gen.synthesize(w, s), target, percep)
        keep_best(loss.detach())
        loss.sum().backward()
        opt.step()
    with torch.no_grad():
        keep_best(loss_spec.per_sample(gen.synthesize(w, s), target, percep))
    return GanLatent(best_w[:n].numpy(), best_s[:n].numpy()), best_loss[:n].numpy()


def reconstruct_gan(images: np.ndarray, enc: Encoder, gen: Generator, refine_steps: int = 0,
                    loss_spec: LossSpec | None = None, lr: float = 0.01) -> np.ndarray:
    """X_RG: G(encode(x)), optionally refined by ``refine_steps`` of latent optimisation."""
    single = np.asarray(images).ndim == 3
    z = encode(images, enc)
    if refine_steps > 0:
        batch = np.asarray(images, dtype=np.float32).reshape((-1,) + np.shape(images)[-3:])
        parts = []
        for s, e in _chunks(len(z)):
            zz, _ = invert_optimize(batch[s:e], gen, z[s:e], refine_steps, loss_spec, lr)
            parts.append(zz)
        z = GanLatent(np.concatenate([p.w for p in parts]), np.concatenate([p.w_star for p in parts]))
    out = generate(z, gen)
    return out[0] if single else out


# --------------------------------------------------------------------------- #
# Training


@dataclass
class GanTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    r1_gamma: float = 1.0
    r1_every: int = 4
    w_avg_beta: float = 0.995
    seed: int = 0
    arch: GanArch = field(default_factory=GanArch)


@dataclass
class EncoderTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    synthetic_fraction: float = 0.5
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0


def train_gan(images: np.ndarray, config: GanTrainConfig) -> tuple[Generator, Discriminator, dict[str, list[float]]]:
    """Non-saturating adversarial training with lazy R1 on reals."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DataError("GAN training needs a nonempty (N, H, W, 3) image array")
    data = torch.from_numpy(to_chw(images))
    with seeded(config.seed):
        gen = Generator(config.arch)
        disc = Discriminator(config.arch.image_size)
    history: dict[str, list[float]] = {"d_loss": [], "g_loss": []}
    if config.steps == 0:
        return gen.eval(), disc.eval(), history

    g = generator(config.seed + 1)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=(0.0, 0.99))
    n = config.batch_size
    gen.train()
    disc.train()
    for step in range(config.steps):
        real = data[torch.randint(0, data.shape[0], (n,), generator=g)]
        w, w_star = gen.sample_latent(n, g)
        with torch.no_grad():
            fake = gen.synthesize(w, w_star)
        d_loss = F.softplus(disc(fake)).mean() + F.softplus(-disc(real)).mean()
        if config.r1_gamma and step % config.r1_every == 0:
            real_r = real.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(disc(real_r).sum(), real_r, create_graph=True)
            d_loss = d_loss + 0.5 * config.r1_gamma * config.r1_every * grad.pow(2).flatten(1).sum(1).mean()
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        w, w_star = gen.sample_latent(n, g)
        g_loss = F.softplus(-disc(gen.synthesize(w, w_star))).mean()
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
        with torch.no_grad():
            gen.w_avg.lerp_(w[:, 0].mean(0), 1.0 - config.w_avg_beta)

        dl, gl = float(d_loss.detach()), float(g_loss.detach())
        if not (math.isfinite(dl) and math.isfinite(gl)):
            raise TrainingError(f"GAN losses became non-finite at step {step}")
        history["d_loss"].append(dl)
        history["g_loss"].append(gl)
    gen.requires_grad_(False)
    disc.requires_grad_(False)
    return gen.eval(), disc.eval(), history


def discriminator_accuracy(disc: Discriminator, real: np.ndarray, fake: np.ndarray) -> float:
    """Balanced accuracy of ``logit > 0 => real`` over the two sets."""
    disc.eval()
    with torch.no_grad():
        lr_ = torch.cat([disc(t) for t in torch.from_numpy(to_chw(real)).split(256)])
        lf = torch.cat([disc(t) for t in torch.from_numpy(to_chw(fake)).split(256)])
    return 0.5 * (float((lr_ > 0).float().mean()) + float((lf <= 0).float().mean()))


def train_encoder(gen: Generator, images: np.ndarray, config: EncoderTrainConfig) -> tuple[Encoder, list[float]]:
    """Fit E so that G(E(x)) reproduces x under the pixel + perceptual objective.

    Each batch mixes real images with fresh generator samples in proportion
    ``synthetic_fraction``.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DataError("encoder training needs a nonempty (N, H, W, 3) image array")
    data = torch.from_numpy(to_chw(images))
    with seeded(config.seed):
        enc = Encoder(gen.arch)
    enc.w_avg.copy_(gen.w_avg)
    history: list[float] = []
    if config.steps == 0:
        return enc.eval(), history

    gen.eval()
    gen.requires_grad_(False)
    percep = PerceptualNet(config.loss.perceptual_seed) if config.loss.perceptual_weight else None
    g = generator(config.seed + 1)
    opt = torch.optim.Adam(enc.parameters(), lr=config.lr)
    n_syn = int(round(config.batch_size * config.synthetic_fraction))
    n_real = config.batch_size - n_syn
    enc.train()
    for step in range(config.steps):
        parts = []
        if n_real:
            parts.append(data[torch.randint(0, data.shape[0], (n_real,), generator=g)])
        if n_syn:
            with torch.no_grad():
                parts.append(gen.synthesize(*gen.sample_latent(n_syn, g)))
        x = torch.cat(parts)
        recon = gen.synthesize(*enc(x))
        loss = config.loss.per_sample(recon, x, percep).mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"encoder loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(value)
    enc.requires_grad_(False)
    return enc.eval(), history


# --------------------------------------------------------------------------- #
# Checkpoints


def _arch_from_header(d: dict) -> GanArch:
    d = dict(d)
    d["widths"] = tuple(d["widths"])
    return GanArch(**d)


def save_gan(path: str | Path, gen: Generator, disc: Discriminator, seed: int, extra: dict | None = None) -> str:
    header = {"arch": asdict(gen.arch), "seed": seed, "extra": extra or {}}
    return ckpt.save_checkpoint(path, "gan", ckpt.flatten_state({"generator": gen, "discriminator": disc}), header)


def load_gan(path: str | Path) -> tuple[Generator, Discriminator, dict]:
    tensors, header = ckpt.load_checkpoint(path, "gan")
    arch = _arch_from_header(header["arch"])
    gen, disc = Generator(arch), Discriminator(arch.image_size)
    gen.load_state_dict(ckpt.unflatten_state(tensors, "generator"))
    disc.load_state_dict(ckpt.unflatten_state(tensors, "discriminator"))
    gen.requires_grad_(False)
    disc.requires_grad_(False)
    return gen.eval(), disc.eval(), header


def save_encoder(path: str | Path, enc: Encoder, seed: int, loss: LossSpec, extra: dict | None = None) -> str:
    header = {"arch": asdict(enc.arch), "seed": seed, "loss": asdict(loss), "extra": extra or {}}
    return ckpt.save_checkpoint(path, "encoder", ckpt.flatten_state({"encoder": enc}), header)


def load_encoder(path: str | Path) -> tuple[Encoder, dict]:
    tensors, header = ckpt.load_checkpoint(path, "encoder")
    enc = Encoder(_arch_from_header(header["arch"]))
    enc.load_state_dict(ckpt.unflatten_state(tensors, "encoder"))
    enc.requires_grad_(False)
    return enc.eval(), header
