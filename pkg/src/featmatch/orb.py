"""ORB: FAST segment test, Harris ranking, gradient-histogram orientation and
rotation-steered BRIEF.

Detection is single scale. Orientation comes from a 36-bin gradient
histogram over the patch (not the intensity centroid). Steered test offsets
are rounded to the nearest pixel; no interpolation is used.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import ImageError, as_image, gaussian_blur
from .rng import XorShift64Star
from .sift import ORIENTATION_BINS, TWO_PI, orientation_histogram

# radius-3 Bresenham circle, clockwise from the top; compass points at 0, 4, 8, 12
CIRCLE = np.array(
    [(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
     (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)]
)
COMPASS = (0, 4, 8, 12)


@dataclass(frozen=True)
class OrbParams:
    threshold: float = 0.08
    arc_n: int = 12
    harris_window: int = 3
    harris_alpha: float = 0.04
    patch_size: int = 31
    n_bits: int = 256
    pattern_seed: int = 0
    sample_blur: float = 2.0


@dataclass(frozen=True)
class OrbKeypoint:
    x: int
    y: int
    harris_score: float = 0.0
    orientation: float = 0.0

    @property
    def response(self) -> float:
        return self.harris_score


@dataclass(frozen=True)
class BriefPattern:
    """``pairs[i] = (px, py, qx, qy)`` integer offsets from the patch centre."""

    pairs: np.ndarray
    patch_size: int
    seed: int

    @property
    def n_bits(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True, eq=False)
class BriefDescriptor:
    """Packed bits, bit ``i`` at bit ``i % 8`` (LSB first) of byte ``i // 8``."""

    bits: np.ndarray
    n_bits: int

    def __eq__(self, other) -> bool:
        return isinstance(other, BriefDescriptor) and self.n_bits == other.n_bits and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash((self.n_bits, self.bits.tobytes()))

    def unpack(self) -> np.ndarray:
        return np.unpackbits(self.bits, bitorder="little")[: self.n_bits]

    def hex(self) -> str:
        return self.bits.tobytes().hex()

    @classmethod
    def from_bits(cls, bits) -> "BriefDescriptor":
        bits = np.asarray(bits, dtype=np.uint8)
        return cls(np.packbits(bits, bitorder="little"), int(bits.size))

    @classmethod
    def from_hex(cls, text: str, n_bits: int | None = None) -> "BriefDescriptor":
        raw = np.frombuffer(bytes.fromhex(text), dtype=np.uint8).copy()
        return cls(raw, n_bits if n_bits is not None else raw.size * 8)


def _check_gray(img) -> np.ndarray:
    img = as_image(img)
    if img.ndim != 2:
        raise ImageError("ORB expects a grayscale image")
    return img


def _longest_run_at_least(flags: np.ndarray, n: int) -> np.ndarray:
    """Rows of an (m, 16) boolean array holding a circular run of >= n Trues."""
    doubled = np.concatenate([flags, flags[:, : n - 1]], axis=1).astype(np.int16)
    csum = np.concatenate([np.zeros((len(flags), 1), np.int16), np.cumsum(doubled, axis=1)], axis=1)
    windows = csum[:, n:] - csum[:, :-n]
    return (windows[:, :16] == n).any(axis=1)


def fast_detect(img, t: float = 0.08, arc_n: int = 12) -> list[OrbKeypoint]:
    """FAST segment test on the 16-pixel circle; a 4-point pretest prunes candidates."""
    img = _check_gray(img)
    if not 9 <= arc_n <= 16:
        raise ValueError("arc_n must lie in [9, 16]")
    if not t > 0:
        raise ValueError("threshold must be positive")
    h, w = img.shape
    if h < 7 or w < 7:
        return []
    center = img[3 : h - 3, 3 : w - 3]
    ring = np.stack([img[3 + dy : h - 3 + dy, 3 + dx : w - 3 + dx] for dx, dy in CIRCLE])
    bright = ring > center + t
    dark = ring < center - t
    # a contiguous arc of n covers at least n // 4 compass points
    need = arc_n // 4
    cand = (bright[list(COMPASS)].sum(axis=0) >= need) | (dark[list(COMPASS)].sum(axis=0) >= need)
    ys, xs = np.nonzero(cand)
    if ys.size == 0:
        return []
    b = bright[:, ys, xs].T
    d = dark[:, ys, xs].T
    keep = _longest_run_at_least(b, arc_n) | _longest_run_at_least(d, arc_n)
    return [OrbKeypoint(int(x) + 3, int(y) + 3) for y, x in zip(ys[keep], xs[keep])]


def _patches(img: np.ndarray, xs, ys, half: int) -> np.ndarray:
    off = np.arange(-half, half + 1)
    rows = np.asarray(ys)[:, None, None] + off[None, :, None]
    cols = np.asarray(xs)[:, None, None] + off[None, None, :]
    return img[rows, cols]


def _central(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dx = (p[:, 1:-1, 2:] - p[:, 1:-1, :-2]) * 0.5
    dy = (p[:, 2:, 1:-1] - p[:, :-2, 1:-1]) * 0.5
    return dx, dy


def _harris_weights(window: int) -> np.ndarray:
    sigma = (window + 1) / 2.0
    off = np.arange(-window, window + 1)
    g = np.exp(-(off**2) / (2 * sigma * sigma))
    return np.outer(g, g)


def harris_scores(img, xs, ys, window: int = 3, alpha: float = 0.04) -> np.ndarray:
    img = _check_gray(img)
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    if xs.size == 0:
        return np.zeros(0)
    h, w = img.shape
    if xs.min() - window < 1 or ys.min() - window < 1 or xs.max() + window > w - 2 or ys.max() + window > h - 2:
        raise ImageError("Harris window leaves the image")
    dx, dy = _central(_patches(img, xs, ys, window + 1))
    g = _harris_weights(window)
    sxx = (g * dx * dx).sum(axis=(1, 2))
    syy = (g * dy * dy).sum(axis=(1, 2))
    sxy = (g * dx * dy).sum(axis=(1, 2))
    return sxx * syy - sxy * sxy - alpha * (sxx + syy) ** 2


def harris_score(img, kp, window: int = 3, alpha: float = 0.04) -> float:
    """``det(M) - alpha * trace(M)**2`` over a Gaussian-weighted (2w+1)^2 window.

    ``kp`` is any object with integer ``x``/``y`` or an ``(x, y)`` tuple.
    """
    x, y = (kp.x, kp.y) if hasattr(kp, "x") else kp
    return float(harris_scores(img, [x], [y], window, alpha)[0])


def orb_orientations(img, xs, ys, patch_size: int = 31) -> np.ndarray:
    img = _check_gray(img)
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    if xs.size == 0:
        return np.zeros(0)
    half = patch_size // 2
    h, w = img.shape
    if xs.min() - half < 1 or ys.min() - half < 1 or xs.max() + half > w - 2 or ys.max() + half > h - 2:
        raise ImageError("orientation patch leaves the image")
    dx, dy = _central(_patches(img, xs, ys, half + 1))
    mag = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), TWO_PI)
    out = np.empty(xs.size)
    for i in range(xs.size):
        hist = orientation_histogram(mag[i], theta[i], 1.0)
        out[i] = TWO_PI * int(np.argmax(hist)) / ORIENTATION_BINS
    return out


def orb_orientation(img, kp, patch_size: int = 31) -> float:
    """Peak bin centre of the magnitude-weighted gradient histogram of the patch."""
    x, y = (kp.x, kp.y) if hasattr(kp, "x") else kp
    return float(orb_orientations(img, [x], [y], patch_size)[0])


def brief_pattern(seed: int = 0, S: int = 31, N: int = 256) -> BriefPattern:
    """N test pairs, isotropic Gaussian (sigma S/5) clipped to the disc of radius S/2."""
    if N < 1 or S < 8:
        raise ValueError("need N >= 1 and S >= 8")
    rng = XorShift64Star(seed)
    sigma = S / 5.0
    limit = (S / 2.0) ** 2

    def point() -> tuple[int, int]:
        while True:
            x = round(rng.normal(sigma))
            y = round(rng.normal(sigma))
            if x * x + y * y <= limit:
                return x, y

    pairs = []
    while len(pairs) < N:
        p = point()
        q = point()
        if p != q:
            pairs.append(p + q)
    return BriefPattern(np.array(pairs, dtype=np.int64), S, seed)


def pattern_margin(pattern: BriefPattern) -> int:
    return int(math.ceil(pattern.patch_size / 2.0 + 0.5))


def brief_bits(smoothed: np.ndarray, xs, ys, thetas, pattern: BriefPattern) -> np.ndarray:
    """Packed descriptors (n, ceil(N/8)) sampled from an already smoothed image."""
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    thetas = np.asarray(thetas, dtype=np.float64)
    nbytes = (pattern.n_bits + 7) // 8
    if xs.size == 0:
        return np.zeros((0, nbytes), np.uint8)
    h, w = smoothed.shape
    m = pattern_margin(pattern)
    if xs.min() < m or ys.min() < m or xs.max() > w - 1 - m or ys.max() > h - 1 - m:
        raise ImageError("BRIEF window leaves the image")
    c = np.cos(thetas)[:, None]
    s = np.sin(thetas)[:, None]
    pr = pattern.pairs.astype(np.float64)

    def sample(ox, oy):
        rx = np.rint(c * ox - s * oy).astype(np.intp)
        ry = np.rint(s * ox + c * oy).astype(np.intp)
        return smoothed[ys[:, None] + ry, xs[:, None] + rx]

    bits = sample(pr[:, 0], pr[:, 1]) < sample(pr[:, 2], pr[:, 3])
    return np.packbits(bits, axis=1, bitorder="little")


def brief_describe(img, kp: OrbKeypoint, pattern: BriefPattern, sample_blur: float | None = 2.0) -> BriefDescriptor:
    """Steered BRIEF for one keypoint.

    The image is smoothed with ``sample_blur`` first; pass ``None`` when the
    caller already smoothed it.
    """
    img = _check_gray(img)
    smoothed = gaussian_blur(img, sample_blur) if sample_blur else img
    bits = brief_bits(smoothed, [kp.x], [kp.y], [kp.orientation], pattern)
    return BriefDescriptor(bits[0], pattern.n_bits)


def border_margin(params: OrbParams) -> int:
    half = params.patch_size // 2
    return max(3, params.harris_window + 1, half + 1, int(math.ceil(params.patch_size / 2.0 + 0.5)))


def orb_detect_and_describe(
    img, max_keypoints: int | None = None, params: OrbParams = OrbParams(), pattern: BriefPattern | None = None
) -> tuple[list[OrbKeypoint], np.ndarray]:
    """FAST -> Harris ranking -> budget -> orientation -> steered BRIEF.

    Returns keypoints and packed descriptors ``(n, N/8)`` as uint8 rows.
    Candidates too close to the border to be described are discarded before
    ranking.
    """
    img = _check_gray(img)
    if pattern is None:
        pattern = brief_pattern(params.pattern_seed, params.patch_size, params.n_bits)
    nbytes = (pattern.n_bits + 7) // 8
    h, w = img.shape
    m = border_margin(params)
    corners = fast_detect(img, params.threshold, params.arc_n)
    corners = [c for c in corners if m <= c.x <= w - 1 - m and m <= c.y <= h - 1 - m]
    if not corners:
        return [], np.zeros((0, nbytes), np.uint8)
    xs = np.array([c.x for c in corners])
    ys = np.array([c.y for c in corners])
    scores = harris_scores(img, xs, ys, params.harris_window, params.harris_alpha)
    # descending score, ties by (y, x)
    order = np.lexsort((xs, ys, -scores))
    if max_keypoints is not None:
        order = order[:max_keypoints]
    xs, ys, scores = xs[order], ys[order], scores[order]
    thetas = orb_orientations(img, xs, ys, params.patch_size)
    smoothed = gaussian_blur(img, params.sample_blur) if params.sample_blur else img
    desc = brief_bits(smoothed, xs, ys, thetas, pattern)
    kps = [OrbKeypoint(int(x), int(y), float(s), float(t)) for x, y, s, t in zip(xs, ys, scores, thetas)]
    return kps, desc
