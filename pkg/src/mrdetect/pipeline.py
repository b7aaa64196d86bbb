"""End-to-end stages on top of a RunConfig: toy data, model training,
reconstruction caching and evaluation. The CLI is a thin wrapper over these."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import diffusion as dm
from . import gan
from .config import RunConfig
from .datasets import (Manifest, ReconCache, Reconstructor, SplitSpec, combined_ckpt_id, derive_seed,
                       generator_pool, load_images, make_splits, precompute_reconstructions, scan_dataset,
                       write_real_images, write_synthetic_images)
from .detector import (DetectorTrainConfig, InputMode, build_input, load_detector, save_detector,
                       train_detector)
from .errors import DataError, DependencyError
from .imaging import PerturbSpec, load_image, save_png
from .metrics import (EvalReport, export_embeddings, per_subset_report, render_table, robustness_sweep,
                      write_json)

log = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.tsv"
RUN_MANIFEST = "run_manifest.json"
LOG_EVERY = 50


# --------------------------------------------------------------------------- #
# Bookkeeping


def ckpt_path(cfg: RunConfig, name: str) -> Path:
    return cfg.dir("checkpoints") / f"{name}.safetensors"


def detector_name(mode: InputMode | str) -> str:
    return f"detector_{InputMode(mode).value}"


def split_spec(cfg: RunConfig) -> SplitSpec:
    s = cfg.splits
    return SplitSpec(tuple(s.train_models), tuple(s.test_models), s.train_count, s.test_count,
                     seed=cfg.seed, train_counts=dict(s.train_counts), test_counts=dict(s.test_counts))


def record_outputs(cfg: RunConfig, command: str, outputs: list[Path]) -> Path:
    """Add ``command``'s outputs (path relative to the run root + sha256) to the run manifest."""
    root = Path(cfg.paths.out)
    root.mkdir(parents=True, exist_ok=True)
    path = root / RUN_MANIFEST
    data = json.loads(path.read_text()) if path.exists() else {}
    entries = []
    for p in sorted(set(outputs)):
        try:
            rel = p.resolve().relative_to(root.resolve()).as_posix()
        except ValueError:
            rel = str(p)
        entries.append({"path": rel, "sha256": ckpt.file_digest(p)})
    data[command] = {"config_digest": cfg.digest(), "outputs": entries}
    write_json(path, data)
    return path


def write_train_log(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def _step_rows(series: dict[str, list[float]]) -> list[dict]:
    """Average each loss series over windows of LOG_EVERY steps."""
    n = len(next(iter(series.values()))) if series else 0
    rows = []
    for start in range(0, n, LOG_EVERY):
        row = {"step": min(start + LOG_EVERY, n)}
        for key, values in series.items():
            row[key] = float(np.mean(values[start : start + LOG_EVERY]))
        rows.append(row)
    return rows


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DependencyError(f"{what} not found: {path}")
    return path


# --------------------------------------------------------------------------- #
# Toy data and generators


def make_real(cfg: RunConfig) -> list[Path]:
    root = cfg.dir("dataset")
    written = write_real_images(root, cfg.toy.n_real, derive_seed(cfg.seed, "real"), cfg.image_size,
                                cfg.toy.real_source_dir)
    return written + [cfg.write_effective(root)]


def generator_training_images(cfg: RunConfig) -> np.ndarray:
    """Real images outside the held-out test selection."""
    root = cfg.dir("dataset")
    try:
        manifest = scan_dataset(root)
    except DataError as exc:
        raise DependencyError(f"real images are required first ({exc})") from exc
    pool = generator_pool(manifest, split_spec(cfg))
    if not pool:
        raise DataError(f"{root}: no real images left for generator training")
    return load_images(manifest, pool, cfg.image_size)


def schedule_for(cfg: RunConfig, steps: int | None = None) -> dm.NoiseSchedule:
    d = cfg.diffusion
    return dm.make_schedule(d.T, num_steps=steps or d.S, beta_start=d.beta_start, beta_end=d.beta_end)


def train_dm_stage(cfg: RunConfig) -> list[Path]:
    d = cfg.diffusion
    images = generator_training_images(cfg)
    tc = dm.DenoiserTrainConfig(steps=d.steps, batch_size=d.batch_size, lr=d.lr, ema_decay=d.ema_decay,
                                seed=derive_seed(cfg.seed, "dm"),
                                arch=dm.DenoiserArch(d.base_channels, tuple(d.channel_mults)))
    log.info("training denoiser on %d images for %d steps", len(images), d.steps)
    den, losses = dm.train_denoiser(images, schedule_for(cfg), tc)
    out = ckpt_path(cfg, "dm")
    dm.save_denoiser(out, den, schedule_for(cfg), tc.seed, {"config_digest": cfg.digest()})
    logp = write_train_log(cfg.dir("checkpoints") / "dm_train_log.jsonl", _step_rows({"loss": losses}))
    return [out, logp, cfg.write_effective(cfg.dir("checkpoints"))]


def train_gan_stage(cfg: RunConfig) -> list[Path]:
    g = cfg.gan
    images = generator_training_images(cfg)
    arch = gan.GanArch(L=g.L, d=g.d, k=g.k, image_size=cfg.image_size, widths=tuple(g.widths))
    tc = gan.GanTrainConfig(steps=g.steps, batch_size=g.batch_size, lr=g.lr, r1_gamma=g.r1_gamma,
                            seed=derive_seed(cfg.seed, "gan"), arch=arch)
    log.info("training GAN on %d images for %d steps", len(images), g.steps)
    gen, disc, hist = gan.train_gan(images, tc)
    out = ckpt_path(cfg, "gan")
    gan.save_gan(out, gen, disc, tc.seed, {"config_digest": cfg.digest()})
    logp = write_train_log(cfg.dir("checkpoints") / "gan_train_log.jsonl", _step_rows(hist))
    return [out, logp, cfg.write_effective(cfg.dir("checkpoints"))]


def loss_spec(cfg: RunConfig) -> gan.LossSpec:
    g = cfg.gan
    return gan.LossSpec(g.pixel_weight, g.perceptual_weight, g.perceptual_seed)


def train_encoder_stage(cfg: RunConfig) -> list[Path]:
    g = cfg.gan
    gen, _, _ = gan.load_gan(_require(ckpt_path(cfg, "gan"), "GAN checkpoint"))
    images = generator_training_images(cfg)
    tc = gan.EncoderTrainConfig(steps=g.encoder_steps, batch_size=g.encoder_batch_size, lr=g.encoder_lr,
                                synthetic_fraction=g.synthetic_fraction, loss=loss_spec(cfg),
                                seed=derive_seed(cfg.seed, "encoder"))
    log.info("training encoder for %d steps", g.encoder_steps)
    enc, losses = gan.train_encoder(gen, images, tc)
    out = ckpt_path(cfg, "encoder")
    gan.save_encoder(out, enc, tc.seed, tc.loss, {"config_digest": cfg.digest(),
                                                  "gan_digest": ckpt.file_digest(ckpt_path(cfg, "gan"))})
    logp = write_train_log(cfg.dir("checkpoints") / "encoder_train_log.jsonl", _step_rows({"loss": losses}))
    return [out, logp, cfg.write_effective(cfg.dir("checkpoints"))]


def toy_samplers(cfg: RunConfig) -> dict:
    gen, _, _ = gan.load_gan(_require(ckpt_path(cfg, "gan"), "GAN checkpoint"))
    den, sched, _ = dm.load_denoiser(_require(ckpt_path(cfg, "dm"), "denoiser checkpoint"))
    short = sched.with_subset(dm.even_subset(sched.T, cfg.diffusion.variant_S))
    size = cfg.image_size
    return {
        "toygan": lambda n, seed: gan.sample_images(gen, n, seed)[0],
        "toygan_trunc": lambda n, seed: gan.sample_images(gen, n, seed, cfg.gan.variant_truncation)[0],
        "toyddim": lambda n, seed: dm.ddim_sample(den, sched, n, size, seed),
        "toyddim_s10": lambda n, seed: dm.ddim_sample(den, short, n, size, seed),
    }


def make_synthetic(cfg: RunConfig) -> list[Path]:
    """Sample the synthetic classes, then scan the tree and write the split manifest."""
    root = cfg.dir("dataset")
    samplers = toy_samplers(cfg)
    unknown = sorted(set(cfg.toy.synthetic_counts) - set(samplers))
    if unknown:
        raise DataError(f"no toy generator named {', '.join(unknown)}")
    written = write_synthetic_images(root, samplers, cfg.toy.synthetic_counts, derive_seed(cfg.seed, "synthetic"))
    out = [p for paths in written.values() for p in paths]
    return out + [write_split_manifest(cfg), cfg.write_effective(root)]


def write_split_manifest(cfg: RunConfig) -> Path:
    root = cfg.dir("dataset")
    manifest = make_splits(scan_dataset(root), split_spec(cfg))
    path = root / MANIFEST_FILE
    manifest.save(path)
    return path


def load_manifest(cfg: RunConfig) -> Manifest:
    root = cfg.dir("dataset")
    return Manifest.load(_require(root / MANIFEST_FILE, "split manifest"), root)


# --------------------------------------------------------------------------- #
# Reconstruction


def load_reconstructor(cfg: RunConfig) -> Reconstructor:
    paths = {name: _require(ckpt_path(cfg, name), f"{name} checkpoint") for name in ("gan", "encoder", "dm")}
    gen, _, _ = gan.load_gan(paths["gan"])
    enc, _ = gan.load_encoder(paths["encoder"])
    den, sched, _ = dm.load_denoiser(paths["dm"])
    cid = combined_ckpt_id(*(ckpt.file_digest(paths[n]) for n in ("gan", "encoder", "dm")), cfg.gan.refine_steps)
    return Reconstructor(enc, gen, den, sched, cfg.gan.refine_steps, cid)


def reconstruct_manifest(cfg: RunConfig) -> list[Path]:
    manifest = load_manifest(cfg)
    recon = load_reconstructor(cfg)
    cache, stats = precompute_reconstructions(manifest, recon, cfg.dir("cache"), cfg.image_size,
                                              cfg.reconstruct_batch)
    log.info("cache: %d hits, %d computed, %d failed", stats.hits, stats.computed, len(stats.failed))
    print(f"reconstructions: {stats.hits} cached, {stats.computed} computed, {len(stats.failed)} skipped")
    skipped = cache.root / "skipped.tsv"
    skipped.write_text("".join(f"{p}\t{reason}\n" for p, reason in stats.failed))
    if stats.failed and stats.hits + stats.computed == 0:
        raise RuntimeError(f"every reconstruction failed; see {skipped}")
    return [cache.root / ReconCache.INDEX, skipped, cfg.write_effective(cfg.dir("cache"))]


def reconstruct_file(cfg: RunConfig, image: Path) -> tuple[list[Path], dict]:
    """Reconstruct one image through both paths; writes the two PNGs and an error summary."""
    recon = load_reconstructor(cfg)
    x = load_image(image, cfg.image_size)
    x_rg, x_rd = recon(x[None])
    out_dir = cfg.dir("reports") / "reconstructions"
    paths = [out_dir / f"{image.stem}_rg.png", out_dir / f"{image.stem}_rd.png"]
    save_png(x_rg[0], paths[0])
    save_png(x_rd[0], paths[1])
    summary = {"image": str(image), "mse_gan": float(np.mean((x - x_rg[0]) ** 2)),
               "mse_dm": float(np.mean((x - x_rd[0]) ** 2)), "ckpt_id": recon.ckpt_id}
    spath = out_dir / f"{image.stem}_errors.json"
    write_json(spath, summary)
    return paths + [spath], summary


def open_cache(cfg: RunConfig) -> ReconCache:
    root = cfg.dir("cache")
    _require(root / ReconCache.INDEX, "reconstruction cache")
    return ReconCache.open(root)


# --------------------------------------------------------------------------- #
# Detector


def detector_inputs(cfg: RunConfig, manifest: Manifest, split: str, mode: InputMode) -> tuple[np.ndarray, np.ndarray]:
    records = sorted(manifest.split(split), key=lambda r: r.path)
    if not records:
        raise DataError(f"split manifest has no {split} records")
    x = load_images(manifest, records, cfg.image_size)
    x_rg, x_rd = open_cache(cfg).load(records, cfg.image_size)
    return build_input(x, x_rg, x_rd, mode), np.array([int(r.family) for r in records])


def train_detector_stage(cfg: RunConfig, mode: InputMode | str | None = None) -> list[Path]:
    mode = InputMode(mode or cfg.detector.mode)
    manifest = load_manifest(cfg)
    inputs, labels = detector_inputs(cfg, manifest, "train", mode)
    d = cfg.detector
    tc = DetectorTrainConfig(epochs=d.epochs, batch_size=d.batch_size, lr=d.lr, backbone=d.backbone,
                             seed=derive_seed(cfg.seed, "detector", mode.value))
    log.info("training %s detector on %d samples", mode.value, len(labels))
    model, hist = train_detector(inputs, labels, mode, tc)
    name = detector_name(mode)
    out = ckpt_path(cfg, name)
    save_detector(out, model, mode, tc.seed, {"config_digest": cfg.digest()})
    logp = write_train_log(cfg.dir("checkpoints") / f"{name}_train_log.jsonl", hist)
    return [out, logp, cfg.write_effective(cfg.dir("checkpoints"))]


def _load_detector(cfg: RunConfig, mode: InputMode | str):
    model, saved_mode, _ = load_detector(_require(ckpt_path(cfg, detector_name(mode)), f"{InputMode(mode).value} detector"))
    return model, saved_mode


# --------------------------------------------------------------------------- #
# Evaluation


def eval_table(cfg: RunConfig) -> tuple[list[Path], EvalReport]:
    manifest = load_manifest(cfg)
    model, mode = _load_detector(cfg, cfg.detector.mode)
    rep = per_subset_report(model, manifest, mode, cfg.image_size, cache=open_cache(cfg),
                            subsets=cfg.splits.test_models, config_digest=cfg.digest())
    reports = cfg.dir("reports")
    rep.save(reports / "table.json")
    (reports / "table.txt").write_text(render_table({mode.value: rep}))
    return [reports / "table.json", reports / "table.txt", cfg.write_effective(reports)], rep


def eval_ablation(cfg: RunConfig) -> tuple[list[Path], dict[str, EvalReport]]:
    manifest = load_manifest(cfg)
    cache = open_cache(cfg)
    out: dict[str, EvalReport] = {}
    for m in cfg.eval.ablation_modes:
        model, mode = _load_detector(cfg, m)
        out[mode.value] = per_subset_report(model, manifest, mode, cfg.image_size, cache=cache,
                                            subsets=cfg.splits.test_models, config_digest=cfg.digest())
    reports = cfg.dir("reports")
    write_json(reports / "ablation.json", {k: v.to_dict() for k, v in out.items()})
    (reports / "ablation.txt").write_text(render_table(out))
    return [reports / "ablation.json", reports / "ablation.txt", cfg.write_effective(reports)], out


def robustness_grid(cfg: RunConfig) -> list[PerturbSpec]:
    return ([PerturbSpec("gaussian_blur", s) for s in cfg.eval.blur_sigmas]
            + [PerturbSpec("jpeg", q) for q in cfg.eval.jpeg_levels])


def plot_robustness(reports: list[EvalReport], grid: list[PerturbSpec], path: Path) -> Path:
    """ACC/AP against perturbation strength; level 0 is the unperturbed baseline."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, kind, label in ((axes[0], "gaussian_blur", "blur sigma"), (axes[1], "jpeg", "JPEG level")):
        pts = {0: reports[0]}
        pts.update({spec.level: rep for spec, rep in zip(grid, reports[1:]) if spec.kind == kind})
        xs = sorted(pts)
        ax.plot(xs, [100 * pts[x].mean_acc for x in xs], marker="o", label="ACC")
        ax.plot(xs, [100 * (pts[x].mean_ap or 0.0) for x in xs], marker="s", label="AP")
        ax.set_xlabel(label)
        ax.set_xticks(xs)
        ax.set_ylim(0, 101)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("%")
    axes[1].legend(loc="lower left")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def eval_robustness(cfg: RunConfig) -> tuple[list[Path], list[EvalReport]]:
    manifest = load_manifest(cfg)
    model, mode = _load_detector(cfg, cfg.detector.mode)
    grid = robustness_grid(cfg)
    reps = robustness_sweep(model, manifest, grid, mode, cfg.image_size,
                            load_reconstructor(cfg), cache=open_cache(cfg), subsets=cfg.splits.test_models,
                            max_per_subset=cfg.eval.robustness_max_per_subset, config_digest=cfg.digest())
    reports = cfg.dir("reports")
    write_json(reports / "robustness.json", [r.to_dict() for r in reps])
    (reports / "robustness.txt").write_text(render_table({r.perturbation: r for r in reps}))
    png = plot_robustness(reps, grid, reports / "robustness.png")
    return [reports / "robustness.json", reports / "robustness.txt", png, cfg.write_effective(reports)], reps


def eval_embeddings(cfg: RunConfig) -> list[Path]:
    manifest = load_manifest(cfg)
    model, mode = _load_detector(cfg, cfg.detector.mode)
    path = cfg.dir("reports") / "embeddings.jsonl"
    export_embeddings(model, manifest, mode, cfg.image_size, path, cache=open_cache(cfg))
    return [path, cfg.write_effective(cfg.dir("reports"))]


def run_all(cfg: RunConfig, modes: list[str] | None = None) -> dict[str, list[Path]]:
    """Every stage in order; the acceptance suite and the README walkthrough use this."""
    stages: dict[str, list[Path]] = {}
    stages["toygen.real"] = make_real(cfg)
    stages["train.dm"] = train_dm_stage(cfg)
    stages["train.gan"] = train_gan_stage(cfg)
    stages["train.encoder"] = train_encoder_stage(cfg)
    stages["toygen.synthetic"] = make_synthetic(cfg)
    stages["reconstruct"] = reconstruct_manifest(cfg)
    for m in modes or [cfg.detector.mode]:
        stages[f"train.detector.{m}"] = train_detector_stage(cfg, m)
    stages["eval.table"] = eval_table(cfg)[0]
    for name, outs in stages.items():
        record_outputs(cfg, name, outs)
    return stages
