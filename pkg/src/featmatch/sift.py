"""SIFT detector and descriptor built on plain numpy.

Pipeline: Gaussian scale space -> difference-of-Gaussians -> strict
26-neighbour extrema -> gradient-histogram orientation -> 4x4x8 gradient
histogram descriptor. No subpixel or edge-response refinement is applied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .image import GradientField, ImageError, as_image, bilinear, downsample_half, gaussian_blur, gradients

TWO_PI = 2.0 * math.pi
ORIENTATION_BINS = 36


@dataclass(frozen=True)
class SiftParams:
    octaves: int = 4
    levels_per_octave: int = 6
    sigma0: float = 1.6
    contrast_threshold: float = 0.03
    peak_ratio: float = 0.8
    patch_size: int = 16
    subregions: int = 4
    bins: int = 8
    clamp: float = 0.2


@dataclass
class ScaleSpace:
    """Blurred images per octave; ``sigmas`` are absolute, in input-image pixels."""

    octaves: list[list[np.ndarray]]
    sigmas: list[list[float]]
    k: float
    sigma0: float
    _gradients: dict = field(default_factory=dict, repr=False)

    def local_sigma(self, level: int) -> float:
        """Blur of ``level`` measured in its own octave's pixels."""
        return self.sigma0 * self.k**level

    def gradient(self, octave: int, level: int) -> GradientField:
        key = (octave, level)
        if key not in self._gradients:
            self._gradients[key] = gradients(self.octaves[octave][level])
        return self._gradients[key]


@dataclass
class DogPyramid:
    octaves: list[np.ndarray]  # one (levels - 1, h, w) stack per octave


@dataclass(frozen=True)
class SiftKeypoint:
    x: float
    y: float
    sigma: float
    orientation: float
    response: float
    octave: int
    level: int

    @property
    def scale(self) -> float:
        return self.sigma


def scale_factor(levels_per_octave: int) -> float:
    if levels_per_octave >= 4:
        return 2.0 ** (1.0 / (levels_per_octave - 3))
    return math.sqrt(2.0)


def build_scale_space(img, octaves: int = 4, levels_per_octave: int = 6, sigma0: float = 1.6) -> ScaleSpace:
    img = as_image(img)
    if img.ndim != 2:
        raise ImageError("scale space needs a grayscale image")
    if octaves < 1 or levels_per_octave < 2 or not sigma0 > 0:
        raise ValueError("need octaves >= 1, levels_per_octave >= 2, sigma0 > 0")
    h, w = img.shape
    if h < 2**octaves or w < 2**octaves:
        raise ImageError(f"{w}x{h} image too small for {octaves} octaves")
    k = scale_factor(levels_per_octave)
    local = [sigma0 * k**j for j in range(levels_per_octave)]
    # input treated as unblurred
    base = gaussian_blur(img, sigma0)
    pyramid: list[list[np.ndarray]] = []
    sigmas: list[list[float]] = []
    for o in range(octaves):
        levels = [base]
        for j in range(1, levels_per_octave):
            inc = math.sqrt(local[j] ** 2 - local[j - 1] ** 2)
            levels.append(gaussian_blur(levels[-1], inc))
        pyramid.append(levels)
        sigmas.append([s * 2**o for s in local])
        if o + 1 < octaves:
            double = next((j for j, s in enumerate(local) if abs(s - 2 * sigma0) < 1e-9 * sigma0), None)
            if double is not None:
                src = levels[double]
            else:
                below = max(j for j, s in enumerate(local) if s <= 2 * sigma0)
                extra = math.sqrt((2 * sigma0) ** 2 - local[below] ** 2)
                src = gaussian_blur(levels[below], extra) if extra > 0 else levels[below]
            base = downsample_half(src)
    return ScaleSpace(pyramid, sigmas, k, sigma0)


def difference_of_gaussians(ss: ScaleSpace) -> DogPyramid:
    if len(ss.octaves[0]) < 2:
        raise ValueError("difference of Gaussians needs at least two levels per octave")
    return DogPyramid([np.diff(np.stack(levels), axis=0) for levels in ss.octaves])


_NEIGHBOURS = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dz, dy, dx) != (0, 0, 0)]


def _extrema_mask(stack: np.ndarray) -> np.ndarray:
    """Strict 26-neighbour extrema of the interior of a (levels, h, w) stack."""
    n, h, w = stack.shape
    c = stack[1:-1, 1:-1, 1:-1]
    hi = np.full(c.shape, -np.inf)
    lo = np.full(c.shape, np.inf)
    for dz, dy, dx in _NEIGHBOURS:
        nb = stack[1 + dz : n - 1 + dz, 1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        np.maximum(hi, nb, out=hi)
        np.minimum(lo, nb, out=lo)
    return (c > hi) | (c < lo)


def detect_extrema(dog: DogPyramid, contrast_threshold: float = 0.03, ss: ScaleSpace | None = None) -> list[SiftKeypoint]:
    """Strict scale-space extrema with ``|D| > contrast_threshold``.

    Keypoints carry orientation 0 until :func:`assign_orientation` runs.
    ``ss`` only supplies absolute sigmas; without it sigma is left as 0.
    """
    out: list[SiftKeypoint] = []
    for o, stack in enumerate(dog.octaves):
        if stack.shape[0] < 3 or stack.shape[1] < 3 or stack.shape[2] < 3:
            continue
        mask = _extrema_mask(stack) & (np.abs(stack[1:-1, 1:-1, 1:-1]) > contrast_threshold)
        zs, ys, xs = np.nonzero(mask)
        scale = 2**o
        for z, y, x in zip(zs + 1, ys + 1, xs + 1):
            out.append(
                SiftKeypoint(
                    x=float(x * scale),
                    y=float(y * scale),
                    sigma=ss.sigmas[o][z] if ss is not None else 0.0,
                    orientation=0.0,
                    response=float(abs(stack[z, y, x])),
                    octave=o,
                    level=int(z),
                )
            )
    return out


def orientation_histogram(magnitude, orientation, weights, bins: int = ORIENTATION_BINS) -> np.ndarray:
    """Weighted orientation histogram with bin ``b`` centred on ``2 pi b / bins``."""
    idx = np.rint(np.asarray(orientation) * (bins / TWO_PI)).astype(np.intp) % bins
    return np.bincount(idx.ravel(), weights=(np.asarray(magnitude) * weights).ravel(), minlength=bins)


def histogram_peaks(hist: np.ndarray, ratio: float = 0.8) -> list[int]:
    """Circular local maxima at or above ``ratio`` of the global maximum."""
    top = hist.max()
    if not top > 0:
        return []
    left = np.roll(hist, 1)
    right = np.roll(hist, -1)
    peaks = np.nonzero((hist > left) & (hist >= right) & (hist >= ratio * top))[0].tolist()
    best = int(np.argmax(hist))
    if best not in peaks:
        peaks.append(best)
    return sorted(peaks)


def _local_coords(kp: SiftKeypoint) -> tuple[int, int]:
    scale = 2**kp.octave
    return int(round(kp.x / scale)), int(round(kp.y / scale))


def assign_orientation(kp: SiftKeypoint, ss: ScaleSpace, peak_ratio: float = 0.8) -> list[SiftKeypoint]:
    """One oriented copy of ``kp`` per histogram peak; the dominant peak comes first."""
    grad = ss.gradient(kp.octave, kp.level)
    h, w = grad.magnitude.shape
    cx, cy = _local_coords(kp)
    sigma = ss.local_sigma(kp.level)
    r = int(math.ceil(3.0 * sigma))
    x0, x1 = max(cx - r, 0), min(cx + r, w - 1)
    y0, y1 = max(cy - r, 0), min(cy + r, h - 1)
    if x0 > x1 or y0 > y1:
        return []
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    inside = d2 <= (3.0 * sigma) ** 2
    if not inside.any():
        return []
    wgt = np.exp(-d2 / (2.0 * (1.5 * sigma) ** 2)) * inside
    hist = orientation_histogram(grad.magnitude[y0 : y1 + 1, x0 : x1 + 1], grad.orientation[y0 : y1 + 1, x0 : x1 + 1], wgt)
    # dominant peak first, then the secondary ones by height
    peaks = sorted(histogram_peaks(hist, peak_ratio), key=lambda b: (-hist[b], b))
    if not peaks:
        # gradient-free neighbourhood still gets a canonical frame
        peaks = [0]
    return [
        SiftKeypoint(kp.x, kp.y, kp.sigma, TWO_PI * b / ORIENTATION_BINS, kp.response, kp.octave, kp.level)
        for b in peaks
    ]


def descriptor_margin(patch_size: int) -> int:
    """Distance from the border (octave pixels) a rotated patch needs."""
    return int(math.ceil((patch_size / 2.0 - 0.5) * math.sqrt(2.0)))


def _patch_grid(S: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(S, dtype=np.float64) - (S / 2.0 - 0.5)
    v, u = np.meshgrid(c, c, indexing="ij")
    return u.ravel(), v.ravel()


def _describe_level(kps: list[SiftKeypoint], ss: ScaleSpace, M: int, B: int, S: int, clamp: float) -> np.ndarray:
    """Descriptors for keypoints that share one (octave, level)."""
    grad = ss.gradient(kps[0].octave, kps[0].level)
    u, v = _patch_grid(S)
    s = S // M
    cell = (np.arange(S) // s)
    region = (cell[:, None] * M + cell[None, :]).ravel()  # row-major over (v, u)
    weight = np.exp(-(u**2 + v**2) / (2.0 * (S / 2.0) ** 2))
    cxy = np.array([_local_coords(kp) for kp in kps], dtype=np.intp)
    theta = np.array([kp.orientation for kp in kps])
    cos, sin = np.cos(theta)[:, None], np.sin(theta)[:, None]
    ox = cos * u - sin * v
    oy = sin * u + cos * v
    base = (cxy[:, :1], cxy[:, 1:])
    gx = bilinear(grad.dx, ox, oy, base)
    gy = bilinear(grad.dy, ox, oy, base)
    mag = np.hypot(gx, gy)
    rel = np.mod(np.arctan2(gy, gx) - theta[:, None], TWO_PI)
    b = np.minimum((rel * (B / TWO_PI)).astype(np.intp), B - 1)
    flat = region[None, :] * B + b
    n = len(kps)
    desc = np.zeros((n, M * M * B))
    rows = np.repeat(np.arange(n), S * S)
    np.add.at(desc, (rows, flat.ravel()), (mag * weight[None, :]).ravel())
    return _normalize(desc, clamp)


def _normalize(desc: np.ndarray, clamp: float) -> np.ndarray:
    """Unit-normalize, clamp at ``clamp`` and renormalize.

    The renormalization is solved to its fixed point: the result has unit
    norm and no entry above ``clamp`` whenever that is possible (at least
    ``1 / clamp**2`` non-zero entries); otherwise a single clamp-renormalize
    pass is applied.
    """
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    v = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 0)
    single = np.minimum(v, clamp)
    n2 = np.linalg.norm(single, axis=1, keepdims=True)
    single = np.divide(single, n2, out=np.zeros_like(single), where=n2 > 0)
    # scale c with ||min(c v, clamp)|| = 1: if the m largest entries clamp,
    # c**2 * (sum of the remaining squares) = 1 - m clamp**2
    s = -np.sort(-v, axis=1)
    d = s.shape[1]
    tail = np.cumsum((s**2)[:, ::-1], axis=1)[:, ::-1]
    m = np.arange(d)
    room = 1.0 - m * clamp**2
    prev = np.concatenate([np.full((len(s), 1), np.inf), s[:, :-1]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.sqrt(room / tail)
        ok = (room > 0) & (tail > 0) & (c * s <= clamp * (1 + 1e-12)) & (c * prev >= clamp * (1 - 1e-12))
    out = single
    rows = np.nonzero(ok.any(axis=1))[0]
    if rows.size:
        first = ok[rows].argmax(axis=1)
        cs = c[rows, first][:, None]
        out = single.copy()
        out[rows] = np.minimum(cs * v[rows], clamp)
    return out


def _fits(kp: SiftKeypoint, ss: ScaleSpace, S: int) -> bool:
    h, w = ss.octaves[kp.octave][kp.level].shape
    cx, cy = _local_coords(kp)
    m = descriptor_margin(S)
    return m <= cx <= w - 1 - m and m <= cy <= h - 1 - m


def compute_descriptor(
    kp: SiftKeypoint, ss: ScaleSpace, M: int = 4, B: int = 8, S: int = 16, clamp: float = 0.2
) -> np.ndarray | None:
    """128-d (for defaults) descriptor, or None when the patch leaves the image."""
    if S % M:
        raise ValueError(f"patch size {S} not divisible by {M}")
    if not _fits(kp, ss, S):
        return None
    return _describe_level([kp], ss, M, B, S, clamp)[0]


def describe_keypoints(kps: list[SiftKeypoint], ss: ScaleSpace, params: SiftParams = SiftParams()) -> np.ndarray:
    """Batch form of :func:`compute_descriptor`; keypoints must all fit."""
    S, M, B = params.patch_size, params.subregions, params.bins
    out = np.zeros((len(kps), M * M * B))
    groups: dict[tuple[int, int], list[int]] = {}
    for i, kp in enumerate(kps):
        groups.setdefault((kp.octave, kp.level), []).append(i)
    for idx in groups.values():
        out[idx] = _describe_level([kps[i] for i in idx], ss, M, B, S, params.clamp)
    return out


def _sort_key(kp: SiftKeypoint):
    return (-kp.response, kp.octave, kp.level, kp.y, kp.x, kp.orientation)


def usable_octaves(shape: tuple[int, int], wanted: int) -> int:
    """Cap the octave count so the coarsest octave is at least 8 pixels."""
    smallest = min(shape)
    n = max(1, int(math.floor(math.log2(smallest))) - 2) if smallest >= 8 else 1
    return max(1, min(wanted, n))


def sift_detect_and_describe(
    img, max_keypoints: int | None = None, params: SiftParams = SiftParams()
) -> tuple[list[SiftKeypoint], np.ndarray]:
    """Detect, rank by |DoG|, truncate to the budget, then describe.

    Returns the keypoints and an ``(n, M*M*B)`` descriptor array in the same
    order. Keypoints whose descriptor patch would leave the image are
    discarded before ranking, so the budget is filled with describable points.
    """
    img = as_image(img)
    if img.ndim != 2:
        raise ImageError("SIFT expects a grayscale image")
    dim = params.subregions**2 * params.bins
    if min(img.shape) < 3 or np.ptp(img) == 0:
        return [], np.zeros((0, dim))
    ss = build_scale_space(img, usable_octaves(img.shape, params.octaves), params.levels_per_octave, params.sigma0)
    dog = difference_of_gaussians(ss)
    candidates = [kp for kp in detect_extrema(dog, params.contrast_threshold, ss) if _fits(kp, ss, params.patch_size)]
    oriented: list[SiftKeypoint] = []
    for kp in candidates:
        oriented.extend(assign_orientation(kp, ss, params.peak_ratio))
    oriented.sort(key=_sort_key)
    if max_keypoints is not None:
        oriented = oriented[:max_keypoints]
    if not oriented:
        return [], np.zeros((0, dim))
    return oriented, describe_keypoints(oriented, ss, params)
