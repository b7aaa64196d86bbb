"""Dataset layout, manifests, split protocol, toy data and the reconstruction cache.

Layout under a dataset root (model names lowercase)::

    real/*.png
    gan/<model>/*.png
    dm/<model>/*.png

Manifest files are tab-separated with a version line and a column header::

    # mrdetect-manifest v1
    path	source_model	family	split
    real/000000.png	real	REAL	train
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from PIL import Image as PILImage

from .checkpoint import digest_bytes
from .errors import DataError, DependencyError, LayoutError
from .imaging import ImageDecodeError, ImageFormatError, load_image, quantize, save_png
from .labels import Family

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_VERSION = "# mrdetect-manifest v1"
CACHE_VERSION = "# mrdetect-recon-cache v1"
UNASSIGNED = "-"

_MODEL_FAMILIES: dict[str, Family] = {
    "real": Family.REAL,
    "stylegan1": Family.GAN,
    "stylegan2": Family.GAN,
    "progan": Family.GAN,
    "vqgan": Family.GAN,
    "adm": Family.DM,
    "iddpm": Family.DM,
    "ldm": Family.DM,
    "sde": Family.DM,
    # desk-scale stand-ins produced by generate_toy_dataset
    "toygan": Family.GAN,
    "toygan_trunc": Family.GAN,
    "toyddim": Family.DM,
    "toyddim_s10": Family.DM,
}


class UnknownModelError(DataError, KeyError):
    pass


def family_label(model_name: str) -> Family:
    try:
        return _MODEL_FAMILIES[model_name.lower()]
    except KeyError:
        raise UnknownModelError(f"model {model_name!r} is not in the model-family table") from None


def register_model(model_name: str, family: Family | str) -> None:
    name = model_name.lower()
    family = Family.parse(family)
    known = _MODEL_FAMILIES.get(name)
    if known is not None and known != family:
        raise DataError(f"model {name!r} already registered as {known.name}")
    _MODEL_FAMILIES[name] = family


def registered_models() -> dict[str, Family]:
    return dict(_MODEL_FAMILIES)


def derive_seed(seed: int, *names: str) -> int:
    """Stable 31-bit seed from a base seed and string keys."""
    keys = [int(seed)] + [zlib.crc32(n.encode()) for n in names]
    return int(np.random.SeedSequence(keys).generate_state(1)[0] & 0x7FFFFFFF)


# --------------------------------------------------------------------------- #
# Manifest


@dataclass(frozen=True)
class Record:
    path: str  # relative to the manifest root, posix separators
    source_model: str
    family: Family
    split: str = UNASSIGNED

    @property
    def subset(self) -> str:
        return "Real" if self.family is Family.REAL else self.source_model


@dataclass
class Manifest:
    root: Path
    records: list[Record]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def by_model(self, model: str) -> list[Record]:
        return [r for r in self.records if r.source_model == model]

    def models(self) -> list[str]:
        return sorted({r.source_model for r in self.records})

    def abspath(self, rec: Record) -> Path:
        return self.root / rec.path

    def save(self, path: str | Path) -> None:
        lines = [MANIFEST_VERSION, "path\tsource_model\tfamily\tsplit"]
        lines += [f"{r.path}\t{r.source_model}\t{r.family.name}\t{r.split}" for r in self.records]
        _atomic_write(Path(path), "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path, root: str | Path) -> "Manifest":
        text = Path(path).read_text().splitlines()
        if not text or text[0] != MANIFEST_VERSION:
            raise DataError(f"{path}: not a {MANIFEST_VERSION!r} file")
        records = []
        for line in text[2:]:
            if not line.strip():
                continue
            p, model, fam, split = line.split("\t")
            records.append(Record(p, model, Family.parse(fam), split))
        return cls(Path(root), records)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _decodable(path: Path) -> str | None:
    try:
        with PILImage.open(path) as im:
            im.verify()
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        return f"{type(exc).__name__}: {exc}"
    return None


def scan_dataset(root: str | Path, verify: bool = True) -> Manifest:
    """Index ``real/``, ``gan/<model>/`` and ``dm/<model>/`` under ``root``.

    Undecodable files go to ``manifest.skipped``; unregistered model
    directories abort the scan.
    """
    root = Path(root)
    if not (root / "real").is_dir():
        raise LayoutError(f"{root}: missing real/ directory")
    groups: list[tuple[str, Family, Path]] = [("real", Family.REAL, root / "real")]
    for top, fam in (("gan", Family.GAN), ("dm", Family.DM)):
        base = root / top
        if not base.is_dir():
            continue
        for sub in sorted(p for p in base.iterdir() if p.is_dir()):
            model = sub.name.lower()
            if family_label(model) != fam:
                raise DataError(f"{sub}: model {model!r} is registered as {family_label(model).name}, "
                                f"not {fam.name}")
            groups.append((model, fam, sub))

    records: list[Record] = []
    skipped: list[tuple[str, str]] = []
    for model, fam, directory in groups:
        for f in _image_files(directory):
            rel = f.relative_to(root).as_posix()
            reason = _decodable(f) if verify else None
            if reason:
                skipped.append((rel, reason))
            else:
                records.append(Record(rel, model, fam))
    if skipped:
        log.warning("skipped %d undecodable files under %s", len(skipped), root)
    return Manifest(root, records, skipped)


# --------------------------------------------------------------------------- #
# Splits


@dataclass
class SplitSpec:
    """Which models feed each split and how many images per type.

    ``train_count`` / ``test_count`` apply to every listed model and to the real
    class; ``train_counts`` / ``test_counts`` override per model (``"real"``
    included). Real images are always part of both splits.
    """

    train_models: tuple[str, ...]
    test_models: tuple[str, ...]
    train_count: int
    test_count: int
    seed: int = 0
    train_counts: dict[str, int] = field(default_factory=dict)
    test_counts: dict[str, int] = field(default_factory=dict)

    def counts_for(self, model: str) -> tuple[int, int]:
        in_train = model == "real" or model in self.train_models
        in_test = model == "real" or model in self.test_models
        n_train = self.train_counts.get(model, self.train_count) if in_train else 0
        n_test = self.test_counts.get(model, self.test_count) if in_test else 0
        return n_train, n_test


def _model_permutation(records: list[Record], seed: int, model: str) -> list[Record]:
    ordered = sorted(records, key=lambda r: r.path)
    perm = np.random.default_rng(derive_seed(seed, "split", model)).permutation(len(ordered))
    return [ordered[i] for i in perm]


def make_splits(manifest: Manifest, spec: SplitSpec) -> Manifest:
    """Assign train/test splits; returns a manifest holding only assigned records.

    Each model is shuffled by its own seeded permutation; the first
    ``n_test`` go to test and the next ``n_train`` to train. A model's test
    selection therefore depends only on the seed and its test count.
    """
    models = ["real"] + sorted(set(spec.train_models) | set(spec.test_models))
    out: list[Record] = []
    for model in models:
        family_label(model)
        n_train, n_test = spec.counts_for(model)
        pool = _model_permutation(manifest.by_model(model), spec.seed, model)
        if n_train + n_test > len(pool):
            raise DataError(f"model {model!r} has {len(pool)} images; split needs "
                            f"{n_train} train + {n_test} test")
        out += [replace(r, split="test") for r in pool[:n_test]]
        out += [replace(r, split="train") for r in pool[n_test : n_test + n_train]]
    out.sort(key=lambda r: (r.split, r.path))
    train_paths = {r.path for r in out if r.split == "train"}
    test_paths = {r.path for r in out if r.split == "test"}
    overlap = train_paths & test_paths
    if overlap:
        raise DataError(f"train/test overlap on {len(overlap)} paths, e.g. {sorted(overlap)[0]}")
    return Manifest(manifest.root, out, list(manifest.skipped))


def generator_pool(manifest: Manifest, spec: SplitSpec) -> list[Record]:
    """Real images outside the test split: the training set for the toy generators."""
    n_test = spec.counts_for("real")[1]
    pool = _model_permutation(manifest.by_model("real"), spec.seed, "real")
    return sorted(pool[n_test:], key=lambda r: r.path)


def load_images(manifest: Manifest, records: Iterable[Record], size: int) -> np.ndarray:
    imgs = [load_image(manifest.abspath(r), size) for r in records]
    if not imgs:
        return np.zeros((0, size, size, 3), dtype=np.float32)
    return np.stack(imgs)


# --------------------------------------------------------------------------- #
# Toy data


def render_face(rng: np.random.Generator, size: int = 32, grain: float = 0.04) -> np.ndarray:
    """Procedural face-like image: symmetric head, hair, eyes, nose and mouth
    over a gradient background, with per-pixel grain. Rendered at 2x and
    box-filtered down."""
    s = size * 2
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    u = (xx + 0.5) / s * 2 - 1
    v = (yy + 0.5) / s * 2 - 1

    def soft(dist, width=0.04):
        return 1.0 / (1.0 + np.exp(np.clip(dist / width, -60, 60)))

    def paint(img, mask, color):
        m = mask[..., None]
        return img * (1 - m) + np.asarray(color) * m

    top, bottom = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    t = ((v + 1) / 2)[..., None]
    img = top * (1 - t) + bottom * t

    skin = np.array([rng.uniform(0.2, 0.9), rng.uniform(-0.1, 0.5), rng.uniform(-0.4, 0.3)])
    cx, cy = rng.uniform(-0.08, 0.08), rng.uniform(-0.05, 0.1)
    rx, ry = rng.uniform(0.45, 0.62), rng.uniform(0.58, 0.78)
    head = ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 - 1
    img = paint(img, soft(head), skin)

    hair = rng.uniform(-1, -0.2, 3) + rng.uniform(0, 0.4)
    hairline = cy - ry * rng.uniform(0.35, 0.6)
    img = paint(img, soft(head, 0.03) * soft(v - hairline, 0.03), hair)

    ex, ey = rx * rng.uniform(0.3, 0.45), cy - ry * rng.uniform(0.05, 0.2)
    er = rng.uniform(0.06, 0.1)
    eye = rng.uniform(-1, -0.5, 3)
    for side in (-1, 1):
        d = np.sqrt(((u - cx - side * ex) / 1.3) ** 2 + (v - ey) ** 2) - er
        img = paint(img, soft(d, 0.02), eye)

    mouth_y, mw = cy + ry * rng.uniform(0.35, 0.55), rx * rng.uniform(0.3, 0.55)
    curve = rng.uniform(-0.15, 0.25)
    mv = v - (mouth_y + curve * (1 - ((u - cx) / mw) ** 2) * 0.3)
    lip = np.array([rng.uniform(0.3, 0.9), rng.uniform(-0.6, 0.0), rng.uniform(-0.6, 0.0)])
    img = paint(img, soft(np.abs(mv) - 0.03, 0.015) * soft(np.abs(u - cx) - mw, 0.02), lip)

    nose = soft(np.abs(u - cx) - 0.02, 0.015) * soft(np.abs(v - (cy + ry * 0.15)) - ry * 0.12, 0.02)
    img = paint(img, 0.5 * nose, skin - 0.3)

    img = img.reshape(size, 2, size, 2, 3).mean(axis=(1, 3))
    if grain:
        img = img + rng.normal(0.0, grain, img.shape)
    return np.clip(img, -1, 1).astype(np.float32)


def write_real_images(root: str | Path, count: int, seed: int, size: int = 32,
                      source_dir: str | Path | None = None) -> list[Path]:
    """Populate ``real/``: procedural faces, or the first ``count`` images of ``source_dir``."""
    out_dir = Path(root) / "real"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if source_dir is not None:
        files = _image_files(Path(source_dir))
        if len(files) < count:
            raise DataError(f"{source_dir} holds {len(files)} images, need {count}")
        for i, f in enumerate(files[:count]):
            dst = out_dir / f"{i:06d}.png"
            save_png(load_image(f, size), dst)
            written.append(dst)
        return written
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        dst = out_dir / f"{i:06d}.png"
        save_png(render_face(rng, size), dst)
        written.append(dst)
    return written


Sampler = Callable[[int, int], np.ndarray]  # (n, seed) -> images


def write_synthetic_images(root: str | Path, samplers: dict[str, Sampler], counts: dict[str, int],
                           seed: int, chunk: int = 256) -> dict[str, list[Path]]:
    """Sample each model into ``gan/<model>/`` or ``dm/<model>/`` per its family."""
    written: dict[str, list[Path]] = {}
    for model in sorted(counts):
        if model not in samplers:
            raise DependencyError(f"no trained generator available for {model!r}")
        fam = family_label(model)
        if fam is Family.REAL:
            raise DataError("real images are not sampled")
        out_dir = Path(root) / fam.name.lower() / model
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for start in range(0, counts[model], chunk):
            n = min(chunk, counts[model] - start)
            imgs = samplers[model](n, derive_seed(seed, "sample", model, str(start)))
            for j, img in enumerate(imgs):
                dst = out_dir / f"{start + j:06d}.png"
                save_png(img, dst)
                paths.append(dst)
        written[model] = paths
        log.info("wrote %d images for %s", len(paths), model)
    return written


@dataclass
class ToyWorldConfig:
    image_size: int = 32
    n_real: int = 2600
    synthetic_counts: dict[str, int] = field(default_factory=lambda: {
        "toygan": 1000, "toyddim": 1000, "toygan_trunc": 250, "toyddim_s10": 250})
    real_source_dir: str | None = None
    seed: int = 0


def generate_toy_dataset(root: str | Path, config: ToyWorldConfig, samplers: dict[str, Sampler] | None = None,
                         include_real: bool = True, include_synthetic: bool = True) -> Manifest:
    """Write the toy dataset tree and return its scanned manifest.

    Synthetic classes require ``samplers`` (one per model name in
    ``config.synthetic_counts``); a missing sampler is a dependency error.
    """
    root = Path(root)
    if include_synthetic:
        missing = sorted(set(config.synthetic_counts) - set(samplers or {}))
        if missing:
            raise DependencyError(f"trained generators required for: {', '.join(missing)}")
    if include_real:
        write_real_images(root, config.n_real, config.seed, config.image_size, config.real_source_dir)
    if include_synthetic:
        write_synthetic_images(root, samplers or {}, config.synthetic_counts, config.seed)
    return scan_dataset(root)


# --------------------------------------------------------------------------- #
# Reconstruction cache


@dataclass
class Reconstructor:
    """Bundles the trained inversion models; produces 8-bit-snapped X_RG, X_RD."""

    encoder: object
    generator: object
    denoiser: object
    schedule: object
    refine_steps: int = 0
    ckpt_id: str = ""

    def __call__(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        from .diffusion import reconstruct_dm
        from .gan import reconstruct_gan

        x_rg = reconstruct_gan(images, self.encoder, self.generator, self.refine_steps)
        x_rd = reconstruct_dm(images, self.denoiser, self.schedule)
        return quantize(x_rg), quantize(x_rd)


def combined_ckpt_id(gan_digest: str, encoder_digest: str, dm_digest: str, refine_steps: int) -> str:
    key = f"gan={gan_digest};encoder={encoder_digest};dm={dm_digest};refine={refine_steps}"
    return digest_bytes(key.encode())[:16]


@dataclass(frozen=True)
class CacheEntry:
    rg_path: str
    rd_path: str
    ckpt_id: str


@dataclass
class ReconCache:
    root: Path
    entries: dict[str, CacheEntry] = field(default_factory=dict)

    INDEX = "index.tsv"

    @classmethod
    def open(cls, root: str | Path) -> "ReconCache":
        root = Path(root)
        cache = cls(root)
        index = root / cls.INDEX
        if index.exists():
            lines = index.read_text().splitlines()
            if not lines or lines[0] != CACHE_VERSION:
                raise DataError(f"{index}: not a {CACHE_VERSION!r} file")
            for line in lines[2:]:
                if line.strip():
                    p, rg, rd, cid = line.split("\t")
                    cache.entries[p] = CacheEntry(rg, rd, cid)
        return cache

    def save(self) -> None:
        lines = [CACHE_VERSION, "path\trg_path\trd_path\tckpt_id"]
        lines += [f"{p}\t{e.rg_path}\t{e.rd_path}\t{e.ckpt_id}" for p, e in sorted(self.entries.items())]
        _atomic_write(self.root / self.INDEX, "\n".join(lines) + "\n")

    def valid(self, path: str, ckpt_id: str) -> bool:
        e = self.entries.get(path)
        return (e is not None and e.ckpt_id == ckpt_id and (self.root / e.rg_path).exists()
                and (self.root / e.rd_path).exists())

    def load(self, records: Iterable[Record], size: int) -> tuple[np.ndarray, np.ndarray]:
        rgs, rds = [], []
        for r in records:
            e = self.entries.get(r.path)
            if e is None:
                raise DependencyError(f"reconstruction cache {self.root} has no entry for {r.path}")
            rgs.append(load_image(self.root / e.rg_path, size))
            rds.append(load_image(self.root / e.rd_path, size))
        if not rgs:
            empty = np.zeros((0, size, size, 3), dtype=np.float32)
            return empty, empty.copy()
        return np.stack(rgs), np.stack(rds)


@dataclass
class CacheStats:
    hits: int = 0
    computed: int = 0
    failed: list[tuple[str, str]] = field(default_factory=list)


def precompute_reconstructions(manifest: Manifest, recon: Reconstructor, cache_root: str | Path,
                               size: int, batch: int = 64) -> tuple[ReconCache, CacheStats]:
    """Compute and persist X_RG / X_RD for every manifest record not already cached
    under ``recon.ckpt_id``. The index is rewritten once at the end."""
    cache = ReconCache.open(cache_root)
    stats = CacheStats()
    todo: list[Record] = []
    for r in manifest.records:
        if cache.valid(r.path, recon.ckpt_id):
            stats.hits += 1
        else:
            todo.append(r)

    for start in range(0, len(todo), batch):
        part, imgs = [], []
        for r in todo[start : start + batch]:
            try:
                imgs.append(load_image(manifest.abspath(r), size))
                part.append(r)
            except (ImageDecodeError, ImageFormatError, FileNotFoundError) as exc:
                stats.failed.append((r.path, str(exc)))
        if not part:
            continue
        x_rg, x_rd = recon(np.stack(imgs))
        for r, rg, rd in zip(part, x_rg, x_rd):
            stem = Path(r.path).with_suffix(".png").as_posix()
            entry = CacheEntry(f"rg/{stem}", f"rd/{stem}", recon.ckpt_id)
            save_png(rg, cache.root / entry.rg_path)
            save_png(rd, cache.root / entry.rd_path)
            cache.entries[r.path] = entry
            stats.computed += 1
        log.info("reconstructed %d/%d", min(start + batch, len(todo)), len(todo))
    cache.save()
    return cache, stats

