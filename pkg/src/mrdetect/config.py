"""Run configuration: one YAML file with a section per module.

Command-line ``--set section.key=value`` overrides are applied on top, and the
merged effective config is written next to every artifact it produces.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .checkpoint import canonical_json, digest_bytes


class ConfigError(ValueError):
    pass


ALL_MODES = ["cascade_multi", "cascade_gan", "cascade_dm", "residual_multi", "residual_gan", "residual_dm"]


@dataclass
class PathsConfig:
    out: str = "runs/toy"
    dataset: str | None = None
    checkpoints: str | None = None
    cache: str | None = None
    reports: str | None = None

    def resolve(self, name: str) -> Path:
        explicit = getattr(self, name)
        return Path(explicit) if explicit else Path(self.out) / name


@dataclass
class ToyConfig:
    n_real: int = 2600
    synthetic_counts: dict[str, int] = field(default_factory=lambda: {
        "toygan": 1000, "toyddim": 1000, "toygan_trunc": 250, "toyddim_s10": 250})
    real_source_dir: str | None = None


@dataclass
class DiffusionConfig:
    T: int = 1000
    S: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_channels: int = 32
    channel_mults: list[int] = field(default_factory=lambda: [1, 2, 2])
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    ema_decay: float = 0.995
    variant_S: int = 10


@dataclass
class GanConfig:
    L: int = 4
    d: int = 64
    k: int = 64
    widths: list[int] = field(default_factory=lambda: [128, 128, 64, 32])
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    r1_gamma: float = 1.0
    encoder_steps: int = 800
    encoder_batch_size: int = 32
    encoder_lr: float = 1e-3
    synthetic_fraction: float = 0.5
    pixel_weight: float = 1.0
    perceptual_weight: float = 0.1
    perceptual_seed: int = 1234
    refine_steps: int = 0
    invert_lr: float = 0.01
    variant_truncation: float = 0.7


@dataclass
class SplitConfig:
    train_models: list[str] = field(default_factory=lambda: ["toygan", "toyddim"])
    test_models: list[str] = field(default_factory=lambda: ["toygan", "toyddim", "toygan_trunc", "toyddim_s10"])
    train_count: int = 500
    test_count: int = 500
    train_counts: dict[str, int] = field(default_factory=dict)
    test_counts: dict[str, int] = field(default_factory=lambda: {"toygan_trunc": 250, "toyddim_s10": 250})


@dataclass
class DetectorConfig:
    mode: str = "cascade_multi"
    backbone: str = "small_resnet"
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class EvalConfig:
    blur_sigmas: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    jpeg_levels: list[int] = field(default_factory=lambda: [1, 2, 3])
    robustness_max_per_subset: int | None = 100
    ablation_modes: list[str] = field(default_factory=lambda: list(ALL_MODES))


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 32
    threads: int = 1
    reconstruct_batch: int = 64
    paths: PathsConfig = field(default_factory=PathsConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of every setting that can change results (paths excluded)."""
        d = self.to_dict()
        d.pop("paths")
        return digest_bytes(canonical_json(d).encode())[:16]

    def dir(self, name: str) -> Path:
        return self.paths.resolve(name)

    def write_effective(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "effective_config.yaml"
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any] | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def _set_path(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None, out: str | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_path(data, key.strip(), yaml.safe_load(raw))
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        _set_path(data, "paths.out", out)
    return from_dict(data)
