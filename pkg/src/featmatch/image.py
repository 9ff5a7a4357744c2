"""Image substrate shared by both detectors.

Images are plain numpy arrays: ``(H, W)`` for grayscale, ``(H, W, 3)`` for
RGB, float64 with loaded values in ``[0, 1]``. Pixel ``(x, y)`` lives at
``img[y, x]``; the origin is the top-left pixel.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image as PILImage

LUMA = np.array([0.299, 0.587, 0.114])


class ImageError(ValueError):
    """Raised for malformed images or violated size preconditions."""


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float
    radius: int
    weights: np.ndarray

    def __len__(self) -> int:
        return self.weights.size


class GradientField(NamedTuple):
    magnitude: np.ndarray
    orientation: np.ndarray
    dx: np.ndarray
    dy: np.ndarray


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2 or (img.ndim == 3 and img.shape[2] in (1, 3)):
        if img.shape[0] < 1 or img.shape[1] < 1:
            raise ImageError("image must have positive width and height")
        return img[..., 0] if img.ndim == 3 and img.shape[2] == 1 else img
    raise ImageError(f"unsupported image shape {img.shape}")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load a PNG or binary PGM file, mapping 8-bit values to [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float64)
            elif im.mode in ("LA", "I", "I;16", "I;16B", "F", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a [0, 1] image as 8-bit PNG or PGM (chosen by suffix), atomically."""
    path = Path(path)
    data = to_uint8(img)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".ppm") else "PNG"
    pil = PILImage.fromarray(data, mode="L" if data.ndim == 2 else "RGB")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            pil.save(fh, format=fmt)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    if img.ndim == 2:
        return img
    return img @ LUMA


def gaussian_kernel(sigma: float) -> GaussianKernel:
    """Sampled 1-D Gaussian truncated at ceil(3 sigma), normalized to unit sum."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    weights /= weights.sum()
    # exact symmetry regardless of summation rounding
    weights = 0.5 * (weights + weights[::-1])
    return GaussianKernel(float(sigma), radius, weights)


def _convolve_axis(img: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    radius = weights.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    # numpy's "reflect" is reflect-101 (edge pixel not repeated)
    padded = np.pad(img, pad, mode="reflect") if img.shape[axis] > 1 else np.pad(img, pad, mode="edge")
    n = img.shape[axis]

    def tap(i):
        return padded[i : i + n, :] if axis == 0 else padded[:, i : i + n]

    # weights sum to one, so accumulate deviations from the centre pixel:
    # constants pass through bit-exact, and symmetric taps share one multiply
    out = np.zeros_like(img)
    for i in range(radius):
        out += weights[i] * (tap(i) + tap(2 * radius - i) - 2.0 * img)
    return img + out


def convolve_separable(img: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    img = as_image(img)
    if img.ndim != 2:
        raise ImageError("convolve_separable expects a single-channel image")
    return _convolve_axis(_convolve_axis(img, kernel.weights, 1), kernel.weights, 0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return convolve_separable(img, gaussian_kernel(sigma))


def gradients(img: np.ndarray) -> GradientField:
    """Central-difference gradients with reflect-101 borders."""
    img = as_image(img)
    if img.ndim != 2:
        raise ImageError("gradients expects a single-channel image")
    h, w = img.shape
    if w < 3 or h < 3:
        raise ImageError(f"gradients need at least 3x3 pixels, got {w}x{h}")
    p = np.pad(img, 1, mode="reflect")
    dx = (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    dy = (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    mag = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
    # mod can round 2*pi - tiny up to exactly 2*pi
    theta[theta >= 2.0 * np.pi] = 0.0
    return GradientField(mag, theta, dx, dy)


def downsample_half(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    h, w = img.shape[:2]
    if w < 2 or h < 2:
        raise ImageError(f"cannot halve a {w}x{h} image")
    return np.ascontiguousarray(img[0 : 2 * (h // 2) : 2, 0 : 2 * (w // 2) : 2])


def bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, base=None) -> np.ndarray:
    """Sample ``img`` at real coordinates; callers guarantee they are in range.

    With ``base = (bx, by)`` (integer arrays broadcastable against ``xs``) the
    coordinates are offsets from those pixels. Interpolation weights then
    depend on the offsets alone, so equal patches sample bit-identically
    wherever they sit in the image.
    """
    h, w = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if base is None:
        bx = by = 0
    else:
        bx, by = (np.asarray(b, dtype=np.intp) for b in base)
    flx, fly = np.floor(xs), np.floor(ys)
    ix = bx + flx.astype(np.intp)
    iy = by + fly.astype(np.intp)
    x0 = np.clip(ix, 0, w - 2)
    y0 = np.clip(iy, 0, h - 2)
    fx = (xs - flx) + (ix - x0)
    fy = (ys - fly) + (iy - y0)
    top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy
