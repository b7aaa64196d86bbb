"""Image I/O, normalization, resampling and the robustness perturbations.

Images are ``float32`` numpy arrays of shape ``(H, W, 3)`` with values in
``[-1, 1]``. Batches stack along a leading axis. The networks consume
``(N, 3, H, W)`` tensors; use :func:`to_chw` / :func:`to_hwc` at that border.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy.ndimage import correlate1d

MIN_RESIZE = 8
JPEG_QUALITY = {1: 90, 2: 60, 3: 30}


class ImageFormatError(ValueError):
    """File is not a recognised raster image."""


class ImageDecodeError(OSError):
    """File looks like an image but could not be decoded."""


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit values to ``[-1, 1]``."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(255.0)) * np.float32(2.0) - np.float32(1.0)


def denormalize(img: np.ndarray) -> np.ndarray:
    """Map ``[-1, 1]`` values back to ``uint8`` (rounded, clipped)."""
    scaled = (np.asarray(img, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap an image to the 8-bit grid, i.e. what a PNG round trip yields."""
    return normalize(denormalize(img))


def check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"expected a square image, got {img.shape[0]}x{img.shape[1]}")


def load_image(path: str | Path, target_size: int | None = None) -> np.ndarray:
    """Read a PNG/JPEG file as a square normalized image.

    Non-square inputs are center-cropped. When ``target_size`` is given and
    differs from the decoded size the image is bilinearly resized.
    """
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            rgb = np.asarray(im.convert("RGB"))
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a recognised image file") from exc
    except FileNotFoundError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: failed to decode ({exc})") from exc

    h, w = rgb.shape[:2]
    if h != w:
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        rgb = rgb[top : top + side, left : left + side]
    img = normalize(rgb)
    if target_size is not None and img.shape[0] != target_size:
        img = resize(img, target_size)
    return img


def save_png(img: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(denormalize(img), mode="RGB").save(path, format="PNG")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized discrete Gaussian taps on ``[-ceil(3 sigma), ceil(3 sigma)]``."""
    radius = max(1, math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array(img, copy=True)
    kernel = gaussian_kernel(sigma)
    out = np.asarray(img, dtype=np.float64)
    # scipy "reflect" is half-sample symmetric: (d c b a | a b c d | d c b a)
    out = correlate1d(out, kernel, axis=0, mode="reflect")
    out = correlate1d(out, kernel, axis=1, mode="reflect")
    return np.clip(out, -1.0, 1.0).astype(img.dtype, copy=False)


def jpeg_compress(img: np.ndarray, level: int) -> np.ndarray:
    if level not in JPEG_QUALITY:
        raise ValueError(f"jpeg level must be one of {sorted(JPEG_QUALITY)}, got {level}")
    buf = io.BytesIO()
    PILImage.fromarray(denormalize(img), mode="RGB").save(buf, format="JPEG", quality=JPEG_QUALITY[level])
    buf.seek(0)
    with PILImage.open(buf) as im:
        decoded = np.asarray(im.convert("RGB"))
    return normalize(decoded)


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edge-clamped (align_corners=False convention)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample to a ``size`` x ``size`` square."""
    if size < MIN_RESIZE:
        raise ValueError(f"resize target must be >= {MIN_RESIZE}, got {size}")
    h, w = img.shape[:2]
    if h == size and w == size:
        return np.array(img, copy=True)
    src = np.asarray(img, dtype=np.float64)
    r_lo, r_hi, r_f = _bilinear_axis(h, size)
    c_lo, c_hi, c_f = _bilinear_axis(w, size)
    rows = src[r_lo] * (1.0 - r_f)[:, None, None] + src[r_hi] * r_f[:, None, None]
    out = rows[:, c_lo] * (1.0 - c_f)[None, :, None] + rows[:, c_hi] * c_f[None, :, None]
    return out.astype(img.dtype, copy=False)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 2.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


@dataclass(frozen=True)
class PerturbSpec:
    """One robustness grid point.

    ``gaussian_blur`` uses ``sigma = level``; level 0 is the identity and is
    allowed so a sweep can carry its own unperturbed anchor. ``jpeg`` levels map
    through :data:`JPEG_QUALITY`.
    """

    kind: str
    level: int

    def __post_init__(self) -> None:
        if self.kind == "gaussian_blur":
            if self.level not in (0, 1, 2, 3):
                raise ValueError(f"blur level must be in 0..3, got {self.level}")
        elif self.kind == "jpeg":
            if self.level not in JPEG_QUALITY:
                raise ValueError(f"jpeg level must be in 1..3, got {self.level}")
        else:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")

    @property
    def tag(self) -> str:
        if self.kind == "gaussian_blur":
            return f"blur_sigma{self.level}"
        return f"jpeg_q{self.level}"

    def apply(self, img: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian_blur":
            return gaussian_blur(img, float(self.level))
        return jpeg_compress(img, self.level)


def to_chw(images: np.ndarray) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N, C, H, W)``; a single image gains a batch axis."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def to_hwc(batch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(batch).transpose(0, 2, 3, 1))
