"""Homographies: DLT estimation and RANSAC with inlier extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import count_inliers

EPS_W = 1e-12


class GeometryError(ValueError):
    pass


class PointAtInfinityError(GeometryError):
    pass


class EstimationError(GeometryError):
    pass


class NoConsensusError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map stored with ``h33 == 1``."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(h)):
            raise EstimationError("non-finite homography")
        if abs(h[2, 2]) < 1e-12:
            raise EstimationError("cannot normalise homography with h33 == 0")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-12:
            raise EstimationError("singular homography")
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.h.ravel()]

    @classmethod
    def from_list(cls, values) -> "Homography":
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))

    def project(self, pts) -> np.ndarray:
        """Map (n, 2) points; rows at infinity come back as inf."""
        return project(self.h, pts)


@dataclass(frozen=True)
class Correspondence:
    src: tuple[float, float]
    dst: tuple[float, float]

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (*self.src, *self.dst)):
            raise GeometryError("correspondence coordinates must be finite")


@dataclass
class RansacResult:
    homography: Homography
    inlier_indices: list[int]
    iterations_run: int
    seed: int
    best_sample_inliers: int = 0
    refit: bool = False

    @property
    def n_inliers(self) -> int:
        return len(self.inlier_indices)

    def to_dict(self) -> dict:
        return {
            "homography": self.homography.to_list(),
            "inliers": list(self.inlier_indices),
            "iterations_run": self.iterations_run,
            "seed": self.seed,
        }


def _matrix(H) -> np.ndarray:
    return H.h if isinstance(H, Homography) else np.asarray(H, dtype=np.float64)


def project(h, pts) -> np.ndarray:
    h = _matrix(h)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    u = h[0, 0] * x + h[0, 1] * y + h[0, 2]
    v = h[1, 0] * x + h[1, 1] * y + h[1, 2]
    bad = np.abs(w) < EPS_W
    w = np.where(bad, 1.0, w)
    out = np.stack([u / w, v / w], axis=1)
    out[bad] = np.inf
    return out


def apply_homography(H, p) -> tuple[float, float]:
    h = _matrix(H)
    x, y = float(p[0]), float(p[1])
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if abs(w) < EPS_W:
        raise PointAtInfinityError(f"({x}, {y}) maps to infinity")
    return (
        (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w,
        (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w,
    )


def reprojection_errors(H, src, dst) -> np.ndarray:
    proj = project(H, src)
    d = proj - np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    err = np.hypot(d[:, 0], d[:, 1])
    err[~np.isfinite(err)] = np.inf
    return err


def reprojection_error(H, c) -> float:
    """Distance between ``c.dst`` and the projection of ``c.src``; inf at infinity."""
    src, dst = (c.src, c.dst) if isinstance(c, Correspondence) else c
    return float(reprojection_errors(H, [src], [dst])[0])


def _split(corrs, dst=None) -> tuple[np.ndarray, np.ndarray]:
    if dst is not None:
        return np.asarray(corrs, dtype=np.float64).reshape(-1, 2), np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    corrs = list(corrs)
    src = np.array([c.src for c in corrs], dtype=np.float64).reshape(-1, 2)
    dst = np.array([c.dst for c in corrs], dtype=np.float64).reshape(-1, 2)
    return src, dst


def _normalizers(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity transforms (batched over the leading axis) taking points to
    zero centroid and mean distance sqrt(2). Returns (T, ok)."""
    c = pts.mean(axis=-2)
    d = np.sqrt(((pts - c[..., None, :]) ** 2).sum(-1)).mean(-1)
    ok = d > 1e-12
    s = np.sqrt(2.0) / np.where(ok, d, 1.0)
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0]
    T[..., 1, 2] = -s * c[..., 1]
    T[..., 2, 2] = 1.0
    return T, ok


def _dlt_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Stack the two DLT equations per correspondence: (..., 2n, 9)."""
    x, y = src[..., 0], src[..., 1]
    xp, yp = dst[..., 0], dst[..., 1]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -x * xp, -y * xp, -xp], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -x * yp, -y * yp, -yp], axis=-1)
    rows = np.stack([r1, r2], axis=-2)
    return rows.reshape(src.shape[:-2] + (2 * src.shape[-2], 9))


def _apply_T(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ np.swapaxes(T[..., :2, :2], -1, -2) + T[..., None, :2, 2]


def _solve_batch(src: np.ndarray, dst: np.ndarray, rank_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Normalized DLT for a batch (m, n, 2). Returns (H (m,3,3) with h33=1, ok)."""
    Ts, ok_s = _normalizers(src)
    Td, ok_d = _normalizers(dst)
    A = _dlt_rows(_apply_T(Ts, src), _apply_T(Td, dst))
    if A.shape[-2] < 9:
        pad = np.zeros(A.shape[:-2] + (9 - A.shape[-2], 9))
        A = np.concatenate([A, pad], axis=-2)
    _, s, vt = np.linalg.svd(A)
    hn = vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    # a one-dimensional null space needs the 8th singular value clear of zero
    ok = ok_s & ok_d & (s[..., 7] > rank_tol * s[..., 0])
    H = np.linalg.inv(Td) @ hn @ Ts
    h33 = H[..., 2, 2]
    ok &= np.abs(h33) >= 1e-12
    H = H / np.where(np.abs(h33) < 1e-12, 1.0, h33)[..., None, None]
    ok &= np.all(np.isfinite(H), axis=(-1, -2))
    det = np.linalg.det(np.where(ok[..., None, None], H, np.eye(3)))
    ok &= np.abs(det) > 1e-12
    return H, ok


def estimate_homography_dlt(corrs, dst=None) -> Homography:
    """Least-squares homography from >= 4 correspondences.

    Accepts a sequence of :class:`Correspondence` or two (n, 2) arrays.
    Coordinates are Hartley-normalized before the 2n x 9 system is solved
    by SVD; the result is denormalized and scaled to ``h33 = 1``.
    """
    src, dst = _split(corrs, dst)
    if len(src) < 4 or len(src) != len(dst):
        raise EstimationError("need at least 4 correspondences")
    H, ok = _solve_batch(src[None], dst[None])
    if not ok[0]:
        raise EstimationError("degenerate correspondence configuration")
    return Homography(H[0])


def _collinear(pts: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """True where any 3 of the 4 points per row lie within ``tol`` of a line."""
    bad = np.zeros(pts.shape[0], dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[:, i], pts[:, j], pts[:, k]
        cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        bad |= np.abs(cross) <= tol
    return bad


def _solve_minimal(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact homographies through 4-point samples (m, 4, 2).

    With exactly four points the DLT null space is one-dimensional, so it is
    found by fixing the last normalized entry to 1 and solving the remaining
    8 x 8 system, which is much cheaper than a batched SVD.
    """
    Ts, ok_s = _normalizers(src)
    Td, ok_d = _normalizers(dst)
    A = _dlt_rows(_apply_T(Ts, src), _apply_T(Td, dst))
    lhs, rhs = A[..., :8], -A[..., 8]
    det = np.linalg.det(lhs)
    ok = ok_s & ok_d & (np.abs(det) > 1e-10)
    H = np.tile(np.eye(3), (len(src), 1, 1))
    if ok.any():
        sol = np.linalg.solve(lhs[ok], rhs[ok][..., None])[..., 0]
        hn = np.concatenate([sol, np.ones((len(sol), 1))], axis=1).reshape(-1, 3, 3)
        Hk = np.linalg.inv(Td[ok]) @ hn @ Ts[ok]
        h33 = Hk[:, 2, 2]
        good = np.abs(h33) >= 1e-12
        Hk = Hk / np.where(good, h33, 1.0)[:, None, None]
        good &= np.all(np.isfinite(Hk), axis=(1, 2))
        good &= np.abs(np.linalg.det(np.where(good[:, None, None], Hk, np.eye(3)))) > 1e-12
        H[ok] = Hk
        ok[np.nonzero(ok)[0][~good]] = False
    return H, ok


def _orientation_flips(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """True where the sample's triangles change orientation inconsistently.

    A homography through four points in general position either preserves
    the orientation of all four sub-triangles or reverses all of them; mixed
    signs mean the fitted map folds the plane between the points.
    """
    neg = np.zeros(src.shape[0], dtype=np.int64)
    for i, j, k in ((0, 1, 2), (1, 2, 3), (0, 2, 3), (0, 1, 3)):
        def cross(p):
            a, b, c = p[:, i], p[:, j], p[:, k]
            return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        neg += (cross(src) * cross(dst)) < 0
    return (neg != 0) & (neg != 4)


def _draw_samples(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    idx = rng.integers(0, n, size=(count, 4))
    while True:
        s = np.sort(idx, axis=1)
        dup = (s[:, 1:] == s[:, :-1]).any(axis=1)
        if not dup.any():
            return idx
        idx[dup] = rng.integers(0, n, size=(int(dup.sum()), 4))


def required_iterations(inlier_fraction: float, confidence: float, sample_size: int = 4) -> float:
    """Iterations after which an all-inlier sample was drawn with ``confidence``."""
    p = inlier_fraction**sample_size
    if p <= 0:
        return math.inf
    if p >= 1:
        return 0
    return math.log(1 - confidence) / math.log(1 - p)


def ransac_homography(
    corrs,
    dst=None,
    *,
    epsilon: float = 3.0,
    max_iters: int = 2000,
    seed: int = 0,
    confidence: float | None = 0.999,
    chunk: int = 200,
) -> RansacResult:
    """Robust homography by 4-point RANSAC.

    Samples are drawn in fixed-size chunks from ``numpy.random.default_rng(seed)``;
    with ``confidence`` set the loop stops early at a chunk boundary once the
    standard ``1 - (1 - w**4)**k`` bound is met. The best minimal model is
    refitted on its inliers; the refit is kept only if it loses no inliers.
    """
    src, dst = _split(corrs, dst)
    n = len(src)
    if n < 4:
        raise NoConsensusError(f"need at least 4 correspondences, got {n}")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    best_count = -1
    best_H = None
    done = 0
    while done < max_iters:
        m = min(chunk, max_iters - done)
        idx = _draw_samples(rng, n, m)
        s, d = src[idx], dst[idx]
        valid = ~(_collinear(s) | _collinear(d) | _orientation_flips(s, d))
        counts = np.full(m, -1)
        if valid.any():
            H, ok = _solve_minimal(s[valid], d[valid])
            vi = np.nonzero(valid)[0][ok]
            counts[vi] = count_inliers(np.ascontiguousarray(H[ok]), src, dst, float(epsilon), EPS_W)
            j = int(np.argmax(counts))
            if counts[j] > best_count:
                best_count = int(counts[j])
                best_H = H[np.searchsorted(np.nonzero(valid)[0], j)]
        done += m
        if confidence is not None and best_count > 0 and done >= required_iterations(best_count / n, confidence):
            break
    if best_H is None or best_count < 4:
        raise NoConsensusError("no model reached 4 inliers")
    H = Homography(best_H)
    inliers = np.nonzero(reprojection_errors(H, src, dst) < epsilon)[0]
    refit = False
    try:
        H2 = estimate_homography_dlt(src[inliers], dst[inliers])
        inl2 = np.nonzero(reprojection_errors(H2, src, dst) < epsilon)[0]
        if len(inl2) >= len(inliers):
            H, inliers, refit = H2, inl2, True
    except GeometryError:
        pass
    return RansacResult(H, [int(i) for i in inliers], done, seed, best_count, refit)
