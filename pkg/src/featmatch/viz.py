"""Side-by-side match renderings drawn with Pillow."""
from __future__ import annotations

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .image import to_grayscale, to_uint8

INLIER = (40, 220, 60)
OUTLIER = (230, 50, 40)
KEYPOINT = (255, 210, 0)


def _rgb(img: np.ndarray) -> PILImage.Image:
    g = to_uint8(to_grayscale(img))
    return PILImage.fromarray(g, mode="L").convert("RGB")


def _dashed(draw: ImageDraw.ImageDraw, p, q, fill, dash: float = 6.0) -> None:
    (x0, y0), (x1, y1) = p, q
    length = float(np.hypot(x1 - x0, y1 - y0))
    steps = max(1, int(length // dash))
    for i in range(0, steps, 2):
        t0, t1 = i / steps, min(1.0, (i + 1) / steps)
        draw.line([(x0 + t0 * (x1 - x0), y0 + t0 * (y1 - y0)), (x0 + t1 * (x1 - x0), y0 + t1 * (y1 - y0))], fill=fill)


def draw_matches(
    img_a: np.ndarray,
    img_b: np.ndarray,
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    matches,
    inliers=(),
    mode: str = "pre",
    scales_a=None,
    scales_b=None,
) -> PILImage.Image:
    """Render two images side by side with match lines.

    ``pre`` draws every match, inliers solid green and outliers dashed red;
    ``post`` draws only the inliers. Keypoint circles scale with ``scales``.
    """
    if mode not in ("pre", "post"):
        raise ValueError(f"mode must be 'pre' or 'post', got {mode!r}")
    a, b = _rgb(img_a), _rgb(img_b)
    canvas = PILImage.new("RGB", (a.width + b.width, max(a.height, b.height)))
    canvas.paste(a, (0, 0))
    canvas.paste(b, (a.width, 0))
    draw = ImageDraw.Draw(canvas)
    off = a.width
    inl = set(int(i) for i in inliers)
    for k, (ia, ib) in enumerate(matches):
        is_in = k in inl
        if mode == "post" and not is_in:
            continue
        p = (float(pts_a[ia][0]), float(pts_a[ia][1]))
        q = (float(pts_b[ib][0]) + off, float(pts_b[ib][1]))
        for (x, y), s in ((p, None if scales_a is None else scales_a[ia]), (q, None if scales_b is None else scales_b[ib])):
            r = 3.0 if s is None else max(2.0, float(s))
            draw.ellipse([x - r, y - r, x + r, y + r], outline=KEYPOINT)
        if is_in:
            draw.line([p, q], fill=INLIER, width=1)
        else:
            _dashed(draw, p, q, OUTLIER)
    return canvas
