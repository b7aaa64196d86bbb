"""Classifier inputs built from (X, X_RG, X_RD), the ternary classifier and its loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .errors import DataError, TrainingError
from .imaging import to_chw
from .labels import NUM_CLASSES, Family
from .nnutil import generator, run_chunked, seeded

PROB_FLOOR = 1e-12
NORMALIZATION_TOL = 1e-6


class InputMode(str, Enum):
    CASCADE_MULTI = "cascade_multi"
    CASCADE_GAN = "cascade_gan"
    CASCADE_DM = "cascade_dm"
    RESIDUAL_MULTI = "residual_multi"
    RESIDUAL_GAN = "residual_gan"
    RESIDUAL_DM = "residual_dm"

    @property
    def residual(self) -> bool:
        return self.value.startswith("residual")

    @property
    def uses_gan(self) -> bool:
        return not self.value.endswith("_dm")

    @property
    def uses_dm(self) -> bool:
        return not self.value.endswith("_gan")

    @property
    def channels(self) -> int:
        planes = int(self.uses_gan) + int(self.uses_dm) + (0 if self.residual else 1)
        return 3 * planes


def build_input(x: np.ndarray, x_rg: np.ndarray | None, x_rd: np.ndarray | None,
                mode: InputMode | str) -> np.ndarray:
    """Stack along the last axis: (X, X_RG, X_RD) or (|X - X_RG|, |X - X_RD|).

    Works for a single ``(H, W, 3)`` image or an ``(N, H, W, 3)`` batch.
    """
    mode = InputMode(mode)
    x = np.asarray(x, dtype=np.float32)
    needed = []
    if mode.uses_gan:
        if x_rg is None:
            raise ValueError(f"{mode.value} needs the GAN reconstruction")
        needed.append(np.asarray(x_rg, dtype=np.float32))
    if mode.uses_dm:
        if x_rd is None:
            raise ValueError(f"{mode.value} needs the DM reconstruction")
        needed.append(np.asarray(x_rd, dtype=np.float32))
    for r in needed:
        if r.shape != x.shape:
            raise ValueError(f"reconstruction shape {r.shape} differs from input shape {x.shape}")
    planes = [np.abs(x - r) for r in needed] if mode.residual else [x] + needed
    return np.concatenate(planes, axis=-1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ternary_cross_entropy(y: np.ndarray, y_hat: np.ndarray) -> float | np.ndarray:
    """``-sum_i y_i log(max(y_hat_i, 1e-12))``; 2-D inputs give one value per row."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.shape[-1] != NUM_CLASSES:
        raise ValueError(f"expected matching (..., {NUM_CLASSES}) arrays, got {y.shape} and {y_hat.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(-1) == 1)):
        raise ValueError("y must be one-hot")
    if np.any(y_hat < 0) or np.any(y_hat > 1) or np.any(np.abs(y_hat.sum(-1) - 1) > NORMALIZATION_TOL):
        raise ValueError("y_hat must be a probability vector summing to 1")
    loss = -(y * np.log(np.maximum(y_hat, PROB_FLOOR))).sum(-1)
    return float(loss) if loss.ndim == 0 else loss


def ternary_cross_entropy_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean training loss; same floor as :func:`ternary_cross_entropy`."""
    logp = F.log_softmax(logits, dim=1).clamp_min(math.log(PROB_FLOOR))
    return -(F.one_hot(labels, NUM_CLASSES).to(logp.dtype) * logp).sum(1).mean()


# --------------------------------------------------------------------------- #
# Backbones


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.short = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.short = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(h)) + self.short(x))


class SmallResNet(nn.Module):
    """Three residual stages (32, 64, 128 channels) + global average pool."""

    def __init__(self, in_channels: int, width: int = 32):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
                                  nn.BatchNorm2d(width), nn.ReLU())
        self.stages = nn.Sequential(BasicBlock(width, width), BasicBlock(width, 2 * width, 2),
                                    BasicBlock(2 * width, 4 * width, 2))
        self.feature_dim = 4 * width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(self.stages(self.stem(x)), 1).flatten(1)


def _resnet50(in_channels: int) -> nn.Module:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
    net.fc = nn.Identity()
    net.feature_dim = 2048
    return net


BACKBONES = {"small_resnet": SmallResNet, "resnet50": _resnet50}


class ClassifierModel(nn.Module):
    def __init__(self, in_channels: int, backbone: str = "small_resnet"):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        self.in_channels = in_channels
        self.backbone_name = backbone
        self.backbone = BACKBONES[backbone](in_channels)
        self.head = nn.Linear(self.backbone.feature_dim, NUM_CLASSES)

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def _batch(self, sample: np.ndarray) -> np.ndarray:
        sample = np.asarray(sample, dtype=np.float32)
        if sample.ndim == 3:
            sample = sample[None]
        if sample.shape[-1] != self.in_channels:
            raise ValueError(f"model expects {self.in_channels} channels, got {sample.shape[-1]}")
        return to_chw(sample)

    def logits(self, sample: np.ndarray) -> np.ndarray:
        self.eval()
        return run_chunked(self, self._batch(sample)).astype(np.float64)

    def features(self, sample: np.ndarray) -> np.ndarray:
        self.eval()
        return run_chunked(self.backbone, self._batch(sample)).astype(np.float64)


def predict(model: ClassifierModel, sample: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax probabilities ``(N, 3)`` and argmax labels (ties -> lowest index)."""
    probs = softmax(model.logits(sample))
    return probs, np.argmax(probs, axis=1)


def extract_features(model: ClassifierModel, sample: np.ndarray) -> np.ndarray:
    """Penultimate (pooled backbone) activations, ``(N, model.feature_dim)``."""
    return model.features(sample)


# --------------------------------------------------------------------------- #
# Training


@dataclass
class DetectorTrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    backbone: str = "small_resnet"
    seed: int = 0


def train_detector(inputs: np.ndarray, labels: np.ndarray, mode: InputMode | str,
                   config: DetectorTrainConfig) -> tuple[ClassifierModel, list[dict]]:
    """Minimise the ternary cross-entropy; returns the model and per-epoch stats."""
    mode = InputMode(mode)
    inputs = np.asarray(inputs, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if inputs.ndim != 4 or inputs.shape[0] != labels.shape[0] or inputs.shape[0] == 0:
        raise DataError("detector training needs matching nonempty inputs and labels")
    if inputs.shape[-1] != mode.channels:
        raise DataError(f"{mode.value} expects {mode.channels} channels, got {inputs.shape[-1]}")
    missing = set(Family) - {Family(int(v)) for v in np.unique(labels)}
    if missing:
        raise DataError(f"training stream lacks classes: {sorted(m.name for m in missing)}")

    with seeded(config.seed):
        model = ClassifierModel(mode.channels, config.backbone)
    history: list[dict] = []
    if config.epochs == 0:
        return model.eval(), history

    x = torch.from_numpy(to_chw(inputs))
    y = torch.from_numpy(labels)
    g = generator(config.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(x.shape[0], generator=g)
        total, correct, loss_sum = 0, 0, 0.0
        for start in range(0, x.shape[0], config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.numel() < 2:
                continue  # BatchNorm needs >1 sample
            logits = model(x[idx])
            loss = ternary_cross_entropy_logits(logits, y[idx])
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingError(f"detector loss became non-finite in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += idx.numel()
            correct += int((logits.argmax(1) == y[idx]).sum())
            loss_sum += value * idx.numel()
        history.append({"epoch": epoch, "loss": loss_sum / max(total, 1), "train_acc": correct / max(total, 1)})
    return model.eval(), history


def training_accuracy(model: ClassifierModel, inputs: np.ndarray, labels: np.ndarray) -> float:
    _, pred = predict(model, inputs)
    return float(np.mean(pred == np.asarray(labels)))


def save_detector(path: str | Path, model: ClassifierModel, mode: InputMode | str, seed: int,
                  extra: dict | None = None) -> str:
    header = {"mode": InputMode(mode).value, "in_channels": model.in_channels,
              "backbone": model.backbone_name, "seed": seed, "extra": extra or {}}
    return ckpt.save_checkpoint(path, "detector", ckpt.flatten_state({"classifier": model}), header)


def load_detector(path: str | Path) -> tuple[ClassifierModel, InputMode, dict]:
    tensors, header = ckpt.load_checkpoint(path, "detector")
    model = ClassifierModel(header["in_channels"], header["backbone"])
    model.load_state_dict(ckpt.unflatten_state(tensors, "classifier"))
    return model.eval(), InputMode(header["mode"]), header

