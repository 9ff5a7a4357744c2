"""Compiled inner loops."""
from __future__ import annotations

import math

import numba
import numpy as np


@numba.njit(cache=True)
def count_inliers(H, src, dst, epsilon, eps_w):
    """Per-model inlier counts; arithmetic mirrors ``geometry.project``."""
    m = H.shape[0]
    n = src.shape[0]
    out = np.zeros(m, np.int64)
    for k in range(m):
        h = H[k]
        c = 0
        for i in range(n):
            x = src[i, 0]
            y = src[i, 1]
            w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
            if abs(w) < eps_w:
                continue
            dx = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w - dst[i, 0]
            if abs(dx) >= epsilon:
                continue
            dy = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w - dst[i, 1]
            if abs(dy) >= epsilon:
                continue
            if math.hypot(dx, dy) < epsilon:
                c += 1
        out[k] = c
    return out
