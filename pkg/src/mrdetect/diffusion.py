"""Noise schedule, toy denoiser, and deterministic DDIM sampling / inversion.

Timesteps run ``1..T``; timestep ``0`` denotes image space (``alpha_bar = 1``).
Both DDIM directions use the predicted-x0 form

    x0_hat = (x - sqrt(1 - ab_from) * eps) / sqrt(ab_from)
    x_to   = sqrt(ab_to) * x0_hat + sqrt(1 - ab_to) * eps

with ``eps = eps_theta(x_from, t_from)``. Under a frozen ``eps`` the
two directions are exact algebraic inverses of each other. Step algebra runs in
float64; the network runs in float32.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .errors import DataError, TrainingError
from .imaging import to_chw, to_hwc
from .nnutil import generator, run_chunked, seeded

DEFAULT_T = 1000
DEFAULT_STEPS = 20


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: tuple[float, ...]
    sigma: tuple[float, ...]
    subset: tuple[int, ...]
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self) -> None:
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T,):
            raise ValueError(f"alpha_bar must have length T={self.T}")
        if not (np.all(ab > 0) and np.all(ab < 1) and np.all(np.diff(ab) < 0)):
            raise ValueError("alpha_bar must be strictly decreasing inside (0, 1)")
        if len(self.sigma) != self.T or any(s != 0 for s in self.sigma):
            raise ValueError("only the deterministic configuration (all sigma_t = 0) is supported")
        _check_subset(self.subset, self.T)

    @property
    def S(self) -> int:
        return len(self.subset)

    def ab(self, t: int) -> float:
        """Cumulative signal coefficient at ``t``; ``t = 0`` is image space."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return self.alpha_bar[t - 1]

    def with_subset(self, subset: tuple[int, ...] | list[int]) -> "NoiseSchedule":
        return NoiseSchedule(self.T, self.alpha_bar, self.sigma, tuple(int(s) for s in subset),
                             self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": "linear_beta", "beta_start": self.beta_start,
                "beta_end": self.beta_end, "subset": list(self.subset)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        base = make_schedule(d["T"], d.get("kind", "linear_beta"), num_steps=len(d["subset"]),
                             beta_start=d["beta_start"], beta_end=d["beta_end"])
        return base.with_subset(d["subset"])


def _check_subset(subset: tuple[int, ...], T: int) -> None:
    if len(subset) == 0:
        raise ValueError("timestep subset must be nonempty")
    if len(subset) > T:
        raise ValueError(f"subset size {len(subset)} exceeds T={T}")
    if subset[0] < 1 or subset[-1] > T:
        raise ValueError(f"subset must lie within [1, {T}]")
    if any(b <= a for a, b in zip(subset, subset[1:])):
        raise ValueError("subset must be strictly increasing")


def even_subset(T: int, num_steps: int) -> tuple[int, ...]:
    """``num_steps`` evenly strided timesteps starting at 1, e.g. 1, 51, ..., 951."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    return tuple(1 + (i * T) // num_steps for i in range(num_steps))


def make_schedule(
    T: int = DEFAULT_T,
    kind: str = "linear_beta",
    num_steps: int | None = None,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    if kind != "linear_beta":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if num_steps is None:
        num_steps = min(DEFAULT_STEPS, T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(
        T=T,
        alpha_bar=tuple(float(a) for a in alpha_bar),
        sigma=(0.0,) * T,
        subset=even_subset(T, num_steps),
        beta_start=beta_start,
        beta_end=beta_end,
    )


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    ab = schedule.ab(t)
    return math.sqrt(ab) * np.asarray(x0, np.float64) + math.sqrt(1.0 - ab) * np.asarray(eps, np.float64)


def ddim_transfer(x: np.ndarray, ab_from: float, ab_to: float, eps: np.ndarray) -> np.ndarray:
    """Move a state between two noise levels along the deterministic DDIM path."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    x0_hat = (x - math.sqrt(1.0 - ab_from) * eps) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0_hat + math.sqrt(1.0 - ab_to) * eps


# --------------------------------------------------------------------------- #
# Noise predictors


class NoisePredictor(Protocol):
    def predict_noise(self, x: np.ndarray, t: int) -> np.ndarray: ...


class FrozenNoise:
    """Test double: returns a fixed noise field regardless of state.

    ``eps`` is either one array used at every timestep or a mapping
    ``t -> array`` for a per-step frozen field.
    """

    def __init__(self, eps: np.ndarray | dict[int, np.ndarray]):
        self.eps = eps

    def predict_noise(self, x: np.ndarray, t: int) -> np.ndarray:
        field_ = self.eps[t] if isinstance(self.eps, dict) else self.eps
        return np.broadcast_to(np.asarray(field_, np.float64), np.shape(x))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass
class DenoiserArch:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    time_dim: int = 64


class Denoiser(nn.Module):
    """Small U-shaped eps-prediction network with sinusoidal timestep embedding."""

    def __init__(self, arch: DenoiserArch | None = None):
        super().__init__()
        self.arch = arch = arch or DenoiserArch()
        c = arch.base_channels
        widths = [c * m for m in arch.channel_mults]
        emb_dim = arch.time_dim * 2
        self.time_mlp = nn.Sequential(nn.Linear(arch.time_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.pool = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down.append(ResBlock(prev, w, emb_dim))
            self.pool.append(nn.Conv2d(w, w, 3, stride=2, padding=1) if i < len(widths) - 1 else nn.Identity())
            prev = w
        self.mid = ResBlock(prev, prev, emb_dim)
        self.up = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(ResBlock(prev + w, w, emb_dim))
            prev = w
        self.out_norm = nn.GroupNorm(8, prev)
        self.out = nn.Conv2d(prev, 3, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.arch.time_dim))
        h = self.stem(x)
        skips = []
        for block, pool in zip(self.down, self.pool):
            h = block(h, emb)
            skips.append(h)
            h = pool(h)
        h = self.mid(h, emb)
        for block in self.up:
            skip = skips.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))

    def predict_noise(self, x: np.ndarray, t: int) -> np.ndarray:
        """Evaluate eps_theta on ``(H, W, 3)`` or ``(N, H, W, 3)`` states; float64 out."""
        x = np.asarray(x)
        single = x.ndim == 3
        batch = to_chw(x)
        was_training = self.training
        self.eval()

        def fn(chunk: torch.Tensor) -> torch.Tensor:
            ts = torch.full((chunk.shape[0],), int(t), dtype=torch.long)
            return self(chunk, ts)

        eps = to_hwc(run_chunked(fn, batch)).astype(np.float64)
        self.train(was_training)
        return eps[0] if single else eps


# --------------------------------------------------------------------------- #
# DDIM


def ddim_reverse_step(x_from: np.ndarray, t_from: int, t_to: int, denoiser: NoisePredictor,
                      schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic denoising step ``t_from -> t_to`` with ``t_to < t_from``."""
    if t_to >= t_from:
        raise ValueError(f"reverse step needs t_to < t_from, got {t_from} -> {t_to}")
    eps = denoiser.predict_noise(x_from, t_from)
    return ddim_transfer(x_from, schedule.ab(t_from), schedule.ab(t_to), eps)


def ddim_invert_step(x_from: np.ndarray, t_from: int, t_to: int, denoiser: NoisePredictor,
                     schedule: NoiseSchedule) -> np.ndarray:
    """One DDIM inversion step ``t_from -> t_to`` with ``t_to > t_from``."""
    if t_to <= t_from:
        raise ValueError(f"inversion step needs t_to > t_from, got {t_from} -> {t_to}")
    eps = denoiser.predict_noise(x_from, t_from)
    return ddim_transfer(x_from, schedule.ab(t_from), schedule.ab(t_to), eps)


def ddim_invert(img: np.ndarray, denoiser: NoisePredictor, schedule: NoiseSchedule) -> np.ndarray:
    """Walk ``0 -> tau_1 -> ... -> tau_S``; the final state is the latent Z_T."""
    if not schedule.subset:
        raise ValueError("timestep subset must be nonempty")
    x = np.asarray(img, dtype=np.float64)
    prev = 0
    for t in schedule.subset:
        x = ddim_invert_step(x, prev, t, denoiser, schedule)
        prev = t
    return x


def ddim_reconstruct(latent: np.ndarray, denoiser: NoisePredictor, schedule: NoiseSchedule,
                     clip: bool = True) -> np.ndarray:
    """Walk ``tau_S -> ... -> tau_1 -> 0`` and clip the final image to [-1, 1]."""
    if not schedule.subset:
        raise ValueError("timestep subset must be nonempty")
    x = np.asarray(latent, dtype=np.float64)
    path = list(schedule.subset[::-1]) + [0]
    for t_from, t_to in zip(path, path[1:]):
        x = ddim_reverse_step(x, t_from, t_to, denoiser, schedule)
    return np.clip(x, -1.0, 1.0) if clip else x


def reconstruct_dm(img: np.ndarray, denoiser: NoisePredictor, schedule: NoiseSchedule) -> np.ndarray:
    """X_RD: DDIM inversion followed by DDIM reconstruction, returned as float32."""
    return ddim_reconstruct(ddim_invert(img, denoiser, schedule), denoiser, schedule).astype(np.float32)


def ddim_sample(denoiser: NoisePredictor, schedule: NoiseSchedule, n: int, image_size: int,
                seed: int) -> np.ndarray:
    """Draw ``n`` images by denoising seeded Gaussian noise from ``tau_S``."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, image_size, image_size, 3))
    return ddim_reconstruct(z, denoiser, schedule).astype(np.float32)


# --------------------------------------------------------------------------- #
# Training


@dataclass
class DenoiserTrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    ema_decay: float = 0.995
    seed: int = 0
    arch: DenoiserArch = field(default_factory=DenoiserArch)


def train_denoiser(images: np.ndarray, schedule: NoiseSchedule,
                   config: DenoiserTrainConfig) -> tuple[Denoiser, list[float]]:
    """Fit eps_theta by noise-regression MSE; returns the EMA network and per-step losses."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DataError("denoiser training needs a nonempty (N, H, W, 3) image array")
    data = torch.from_numpy(to_chw(images))
    with seeded(config.seed):
        net = Denoiser(config.arch)
    ema = Denoiser(config.arch)
    ema.load_state_dict(net.state_dict())
    ema.requires_grad_(False)
    if config.steps == 0:
        return ema.eval(), []

    gen = generator(config.seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sqrt_ab = torch.tensor(np.sqrt(schedule.alpha_bar), dtype=torch.float32)
    sqrt_1mab = torch.tensor(np.sqrt(1.0 - np.asarray(schedule.alpha_bar)), dtype=torch.float32)
    history: list[float] = []
    net.train()
    for step in range(config.steps):
        idx = torch.randint(0, data.shape[0], (config.batch_size,), generator=gen)
        x0 = data[idx]
        t = torch.randint(1, schedule.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        xt = sqrt_ab[t - 1, None, None, None] * x0 + sqrt_1mab[t - 1, None, None, None] * eps
        loss = F.mse_loss(net(xt, t), eps)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"denoiser loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            for pe, p in zip(ema.parameters(), net.parameters()):
                pe.mul_(config.ema_decay).add_(p, alpha=1.0 - config.ema_decay)
        history.append(value)
    return ema.eval(), history


def save_denoiser(path: str | Path, denoiser: Denoiser, schedule: NoiseSchedule, seed: int,
                  extra: dict | None = None) -> str:
    header = {"arch": asdict(denoiser.arch), "schedule": schedule.to_dict(), "seed": seed,
              "extra": extra or {}}
    return ckpt.save_checkpoint(path, "denoiser", ckpt.flatten_state({"denoiser": denoiser}), header)


def load_denoiser(path: str | Path) -> tuple[Denoiser, NoiseSchedule, dict]:
    tensors, header = ckpt.load_checkpoint(path, "denoiser")
    arch = header["arch"]
    arch["channel_mults"] = tuple(arch["channel_mults"])
    net = Denoiser(DenoiserArch(**arch))
    net.load_state_dict(ckpt.unflatten_state(tensors, "denoiser"))
    net.requires_grad_(False)
    return net.eval(), NoiseSchedule.from_dict(header["schedule"]), header
